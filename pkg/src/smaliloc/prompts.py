"""Prompt templates, rendering and method-boundary chunking of large classes."""

from __future__ import annotations

import math
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .behaviors import Behavior
from .errors import InputError
from .smali import SmaliClass

BASELINE = "baseline"
PHASE1 = "phase1"
PHASE2 = "phase2"
KINDS = (BASELINE, PHASE1, PHASE2)

DEFAULT_TOKEN_BUDGET = 100_000

REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    BASELINE: frozenset({"class_content"}),
    PHASE1: frozenset({"class_content", "behavior_description"}),
    PHASE2: frozenset({"class_content", "first_phase_explanation"}),
}
# behavior_list is optional in the baseline template; when absent the list
# must be written into the template text itself.
ALLOWED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    BASELINE: REQUIRED_PLACEHOLDERS[BASELINE] | {"behavior_list"},
    PHASE1: REQUIRED_PLACEHOLDERS[PHASE1],
    PHASE2: REQUIRED_PLACEHOLDERS[PHASE2],
}
_ALL_NAMES = frozenset().union(*ALLOWED_PLACEHOLDERS.values())
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(sorted(_ALL_NAMES)) + r")\}")


class TemplateError(InputError):
    pass


class EmptyExplanation(InputError):
    pass


def estimate_tokens(text: str) -> int:
    """ceil(utf-8 byte length / 4). A unitless budget heuristic, not a tokenizer."""
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TemplateError(f"unknown template kind {self.kind!r}")
        found = set(_PLACEHOLDER_RE.findall(self.text))
        missing = REQUIRED_PLACEHOLDERS[self.kind] - found
        if missing:
            raise TemplateError(f"{self.kind} template lacks placeholders {sorted(missing)}")
        foreign = found - ALLOWED_PLACEHOLDERS[self.kind]
        if foreign:
            raise TemplateError(f"{self.kind} template has placeholders it cannot fill: {sorted(foreign)}")

    def render(self, values: Mapping[str, str]) -> str:
        # One pass over the template only; substituted text is never rescanned,
        # so braces inside Smali or explanations survive verbatim.
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], self.text)


def default_template(kind: str) -> PromptTemplate:
    text = resources.files("smaliloc.data").joinpath("templates", f"{kind}.txt").read_text(encoding="utf-8")
    return PromptTemplate(kind, text)


def load_templates(overrides: Mapping[str, str | Path] | None = None) -> dict[str, PromptTemplate]:
    templates = {kind: default_template(kind) for kind in KINDS}
    for kind, path in (overrides or {}).items():
        path = Path(path)
        if not path.is_file():
            raise TemplateError(f"{kind} template not found: {path}")
        templates[kind] = PromptTemplate(kind, path.read_text(encoding="utf-8"))
    return templates


@dataclass(frozen=True)
class RenderedPrompt:
    kind: str
    text: str
    class_name: str
    behavior_id: int | None = None
    chunk_index: int = 1
    chunk_count: int = 1
    token_estimate: int = 0


@dataclass(frozen=True)
class Chunk:
    text: str
    method_indices: tuple[int, ...]
    oversized: bool = False


def chunk_class(cls: SmaliClass, token_budget: int = DEFAULT_TOKEN_BUDGET) -> list[Chunk]:
    """Split a class on method boundaries so each chunk fits ``token_budget``.

    Every chunk repeats the class header. A single method that cannot fit
    with the header gets a chunk of its own marked ``oversized``.
    """
    if token_budget <= 0:
        raise ValueError("token_budget must be positive")
    all_idx = tuple(range(len(cls.methods)))
    if estimate_tokens(cls.raw_text) <= token_budget or len(cls.methods) <= 1:
        return [Chunk(cls.raw_text, all_idx, estimate_tokens(cls.raw_text) > token_budget)]

    header = cls.header
    chunks: list[Chunk] = []
    body, idx = "", []
    for i, seg in enumerate(cls.method_segments()):
        if idx and estimate_tokens(header + body + seg) > token_budget:
            chunks.append(_close(header, body, idx, token_budget))
            body, idx = "", []
        body += seg
        idx.append(i)
    chunks.append(_close(header, body, idx, token_budget))
    return chunks


def _close(header: str, body: str, idx: list[int], budget: int) -> Chunk:
    text = header + body
    return Chunk(text, tuple(idx), estimate_tokens(text) > budget)


def behavior_block(behavior: Behavior) -> str:
    return f"{behavior.name}: {behavior.description}"


def behavior_list(taxonomy: Sequence[Behavior]) -> str:
    return "\n".join(f"{b.id}. {b.name}" for b in taxonomy)


def _finish(kind, text, cls, behavior_id, chunk_index, chunk_count) -> RenderedPrompt:
    return RenderedPrompt(
        kind=kind,
        text=text,
        class_name=cls.class_name,
        behavior_id=behavior_id,
        chunk_index=chunk_index,
        chunk_count=chunk_count,
        token_estimate=estimate_tokens(text),
    )


def render_baseline(
    cls: SmaliClass,
    taxonomy: Sequence[Behavior],
    template: PromptTemplate | None = None,
    content: str | None = None,
    chunk_index: int = 1,
    chunk_count: int = 1,
) -> RenderedPrompt:
    template = template or default_template(BASELINE)
    text = template.render(
        {"class_content": cls.raw_text if content is None else content, "behavior_list": behavior_list(taxonomy)}
    )
    return _finish(BASELINE, text, cls, None, chunk_index, chunk_count)


def render_phase1(
    cls: SmaliClass,
    behavior: Behavior,
    template: PromptTemplate | None = None,
    content: str | None = None,
    chunk_index: int = 1,
    chunk_count: int = 1,
) -> RenderedPrompt:
    template = template or default_template(PHASE1)
    text = template.render(
        {"class_content": cls.raw_text if content is None else content, "behavior_description": behavior_block(behavior)}
    )
    return _finish(PHASE1, text, cls, behavior.id, chunk_index, chunk_count)


def render_phase2(
    cls: SmaliClass,
    phase1_explanation: str,
    template: PromptTemplate | None = None,
    content: str | None = None,
    chunk_index: int = 1,
    chunk_count: int = 1,
    behavior_id: int | None = None,
) -> RenderedPrompt:
    if not phase1_explanation.strip():
        raise EmptyExplanation(f"phase-1 explanation for {cls.class_name} is empty")
    template = template or default_template(PHASE2)
    text = template.render(
        {"class_content": cls.raw_text if content is None else content, "first_phase_explanation": phase1_explanation}
    )
    return _finish(PHASE2, text, cls, behavior_id, chunk_index, chunk_count)


class PromptEngine:
    """Renders every prompt a class needs, one per chunk."""

    def __init__(self, templates: Mapping[str, PromptTemplate] | None = None, token_budget: int = DEFAULT_TOKEN_BUDGET):
        self.templates = dict(templates or load_templates())
        self.token_budget = token_budget

    def _chunks(self, cls: SmaliClass) -> list[Chunk]:
        return chunk_class(cls, self.token_budget)

    def baseline(self, cls: SmaliClass, taxonomy: Sequence[Behavior]) -> list[RenderedPrompt]:
        chunks = self._chunks(cls)
        return [
            render_baseline(cls, taxonomy, self.templates[BASELINE], c.text, i, len(chunks))
            for i, c in enumerate(chunks, start=1)
        ]

    def phase1(self, cls: SmaliClass, behavior: Behavior) -> list[RenderedPrompt]:
        chunks = self._chunks(cls)
        return [
            render_phase1(cls, behavior, self.templates[PHASE1], c.text, i, len(chunks))
            for i, c in enumerate(chunks, start=1)
        ]

    def phase2(self, cls: SmaliClass, explanation: str, behavior_id: int | None = None) -> list[RenderedPrompt]:
        chunks = self._chunks(cls)
        return [
            render_phase2(cls, explanation, self.templates[PHASE2], c.text, i, len(chunks), behavior_id)
            for i, c in enumerate(chunks, start=1)
        ]
