"""Parsing of raw model completions into typed verdicts.

Formatting noise (code fences, markdown emphasis, key case, prose around the
keyed block) is tolerated. Semantic violations such as an IS_MALICIOUS value
other than yes/no or a non-numeric confidence raise :class:`ParseError`.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass

from .behaviors import CANONICAL_NAMES
from .errors import EXIT_PARSE_BUDGET, SmalilocError
from .smali import SmaliClass, SmaliMethod

EXACT = "exact"
NORMALIZED = "normalized"
FUZZY = "fuzzy"
UNMATCHED = "unmatched"

_KEYS = ("IS_MALICIOUS", "CONFIDENCE", "EXPLANATION", "BEHAVIORS", "BEHAVIOR", "METHOD", "ROLE")
_KEY_RE = re.compile(
    r"^\s*(?:[-*>#]+\s+)?[*_`]*\s*(IS[ _]MALICIOUS|CONFIDENCE|EXPLANATION|BEHAVIORS?|METHOD|ROLE)"
    r"\s*[*_`]*\s*:\s*[*_]*\s?(.*)$",
    re.IGNORECASE,
)
_FENCE_RE = re.compile(r"^\s*```")
_CONF_RE = re.compile(r"^(\d{1,6})(?:\.\d+)?\s*(?:%|/\s*100)?$")
_MULTILINE_KEYS = {"EXPLANATION", "ROLE"}
_NONE_WORDS = {"", "none", "n/a", "na", "-", "null", "nothing"}


class ParseError(SmalilocError):
    exit_code = EXIT_PARSE_BUDGET

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AmbiguousMatch(SmalilocError):
    def __init__(self, reported: str, candidates: Sequence[SmaliMethod]):
        self.candidates = tuple(candidates)
        names = ", ".join(c.signature_line for c in candidates)
        super().__init__(f"{reported!r} matches several methods: {names}")


@dataclass(frozen=True)
class Phase1Verdict:
    is_malicious: bool
    confidence: int
    explanation: str


@dataclass(frozen=True)
class Phase2Entry:
    reported_method_line: str
    role: str
    confidence: int
    confidence_missing: bool = False


@dataclass(frozen=True)
class MethodFinding:
    reported_method_line: str
    role: str
    confidence: int
    resolution: str
    resolved_signature: str | None = None
    note: str = ""

    def __post_init__(self):
        if (self.resolution != UNMATCHED) != (self.resolved_signature is not None):
            raise ValueError("resolved_signature must be present exactly when resolution is not unmatched")


@dataclass(frozen=True)
class BaselineVerdict:
    is_malicious: bool
    confidence: int
    explanation: str
    behavior_ids: tuple[int, ...]
    unrecognized_behaviors: tuple[str, ...]
    methods: tuple[Phase2Entry, ...]


# -- tokenizing --------------------------------------------------------------


def _clean_value(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "`'\"":
        value = value[1:-1].strip()
    return value


def _items(raw: str) -> list[tuple[str, str]]:
    """Keyed (KEY, value) pairs in order; free lines extend multi-line values."""
    items: list[list[str]] = []
    for line in raw.splitlines():
        if _FENCE_RE.match(line):
            continue
        m = _KEY_RE.match(line)
        if m:
            key = m.group(1).upper().replace(" ", "_")
            if key == "BEHAVIORS":
                key = "BEHAVIOR"
            items.append([key, m.group(2)])
        elif items and items[-1][0] in _MULTILINE_KEYS:
            items[-1][1] += "\n" + line
    return [(k, _clean_value(v)) for k, v in items]


def _parse_bool(value: str) -> bool:
    word = value.strip().strip(".!*_`\"'").strip().lower()
    if word == "yes":
        return True
    if word == "no":
        return False
    raise ParseError("IS_MALICIOUS", f"expected yes or no, got {value!r}")


def _parse_confidence(value: str) -> int:
    m = _CONF_RE.match(value.strip().strip("*_`"))
    if not m:
        raise ParseError("CONFIDENCE", f"not a number: {value!r}")
    number = round(float(m.group(0).rstrip("%").split("/")[0]))
    if not 0 <= number <= 100:
        raise ParseError("CONFIDENCE", f"out of range 0-100: {value!r}")
    return number


def _first(items, key):
    for k, v in items:
        if k == key:
            return v
    return None


def _verdict_fields(items) -> Phase1Verdict:
    flag = _first(items, "IS_MALICIOUS")
    if flag is None:
        raise ParseError("IS_MALICIOUS", "missing")
    is_malicious = _parse_bool(flag)
    conf = _first(items, "CONFIDENCE")
    if conf is None:
        raise ParseError("CONFIDENCE", "missing")
    confidence = _parse_confidence(conf)
    explanation = (_first(items, "EXPLANATION") or "").strip()
    if is_malicious and not explanation:
        raise ParseError("EXPLANATION", "missing for a malicious verdict")
    return Phase1Verdict(is_malicious, confidence, explanation)


def _method_entries(items) -> list[Phase2Entry]:
    entries: list[dict] = []
    for key, value in items:
        if key == "METHOD":
            if not value:
                raise ParseError("METHOD", "empty method line")
            entries.append({"line": value, "role": [], "conf": None})
        elif key in ("ROLE", "CONFIDENCE"):
            if not entries:
                raise ParseError(key, "appears before any METHOD")
            if key == "ROLE":
                entries[-1]["role"].append(value.strip())
            elif entries[-1]["conf"] is None:
                entries[-1]["conf"] = _parse_confidence(value)
    return [
        Phase2Entry(
            reported_method_line=e["line"],
            role="\n".join(r for r in e["role"] if r),
            confidence=e["conf"] if e["conf"] is not None else 0,
            confidence_missing=e["conf"] is None,
        )
        for e in entries
    ]


# -- public parsers ----------------------------------------------------------


def parse_phase1(raw: str) -> Phase1Verdict:
    return _verdict_fields(_items(raw))


def parse_phase2(raw: str) -> list[Phase2Entry]:
    items = _items(raw)
    for i, (key, _) in enumerate(items):
        if key == "METHOD":
            return _method_entries(items[i:])
        if key == "ROLE":
            raise ParseError("ROLE", "appears before any METHOD")
    return []


def split_behaviors(value: str) -> list[str]:
    if value.strip().lower() in _NONE_WORDS:
        return []
    names = []
    for part in re.split(r"[,;\n]", value):
        part = re.sub(r"^\s*\d+\s*[.)]\s*", "", part).strip().strip("*_`\"'.").strip()
        if part and part.lower() not in _NONE_WORDS:
            names.append(part)
    return names


def parse_baseline(raw: str, behavior_names: Sequence[str] = CANONICAL_NAMES) -> BaselineVerdict:
    """Parse the single-prompt grammar: verdict fields, BEHAVIOR list, METHOD/ROLE pairs.

    ``behavior_names[i]`` is the name of behavior id ``i + 1``. Unknown names
    are kept in ``unrecognized_behaviors``.
    """
    items = _items(raw)
    cut = next((i for i, (k, _) in enumerate(items) if k in ("METHOD", "ROLE")), len(items))
    head, tail = items[:cut], items[cut:]
    verdict = _verdict_fields(head)

    lookup = {n.casefold(): i for i, n in enumerate(behavior_names, start=1)}
    ids: list[int] = []
    unknown: list[str] = []
    for name in split_behaviors(_first(head, "BEHAVIOR") or ""):
        bid = lookup.get(name.casefold())
        if bid is None:
            unknown.append(name)
        elif bid not in ids:
            ids.append(bid)
    return BaselineVerdict(
        is_malicious=verdict.is_malicious,
        confidence=verdict.confidence,
        explanation=verdict.explanation,
        behavior_ids=tuple(sorted(ids)),
        unrecognized_behaviors=tuple(unknown),
        methods=tuple(_method_entries(tail)),
    )


def format_phase1(v: Phase1Verdict) -> str:
    return f"IS_MALICIOUS: {'yes' if v.is_malicious else 'no'}\nCONFIDENCE: {v.confidence}\nEXPLANATION: {v.explanation}\n"


def format_phase2(entries: Sequence[Phase2Entry]) -> str:
    out = []
    for e in entries:
        out.append(f"METHOD: {e.reported_method_line}\nROLE: {e.role}\n")
        if not e.confidence_missing:
            out.append(f"CONFIDENCE: {e.confidence}\n")
    return "".join(out)


# -- method resolution -------------------------------------------------------


def normalize_method_line(line: str) -> str:
    """Collapse whitespace and drop a leading ``.method`` token."""
    tokens = _clean_value(line).split()
    if tokens and tokens[0] == ".method":
        tokens = tokens[1:]
    return " ".join(tokens)


def resolve_method(reported_line: str, cls: SmaliClass) -> tuple[str, SmaliMethod | None]:
    """Map a model-reported METHOD line onto a parsed method.

    Tries, in order: exact match on the trimmed line, match after
    :func:`normalize_method_line`, then a unique method whose name+descriptor
    occurs in the line. Several fuzzy candidates raise :class:`AmbiguousMatch`.
    """
    trimmed = reported_line.strip()
    for m in cls.methods:
        if m.signature_line == trimmed:
            return EXACT, m
    norm = normalize_method_line(reported_line)
    for m in cls.methods:
        if normalize_method_line(m.signature_line) == norm:
            return NORMALIZED, m
    hits = [
        m
        for m in cls.methods
        if re.search(r"(?<![\w$-])" + re.escape(m.name_and_descriptor), reported_line)
    ]
    if len(hits) == 1:
        return FUZZY, hits[0]
    if len(hits) > 1:
        raise AmbiguousMatch(reported_line, hits)
    return UNMATCHED, None


def resolve_entry(entry: Phase2Entry, cls: SmaliClass) -> MethodFinding:
    note = "confidence missing" if entry.confidence_missing else ""
    try:
        resolution, method = resolve_method(entry.reported_method_line, cls)
    except AmbiguousMatch as exc:
        resolution, method = UNMATCHED, None
        note = "; ".join(filter(None, [note, f"ambiguous: {len(exc.candidates)} candidates"]))
    return MethodFinding(
        reported_method_line=entry.reported_method_line,
        role=entry.role,
        confidence=entry.confidence,
        resolution=resolution,
        resolved_signature=method.signature_line if method else None,
        note=note,
    )


def merge_method_findings(findings: Sequence[MethodFinding]) -> list[MethodFinding]:
    """Merge duplicates of one resolved method (or one unmatched line): max confidence, roles joined."""
    merged: dict[str, MethodFinding] = {}
    order: list[str] = []
    for f in findings:
        key = f.resolved_signature if f.resolved_signature is not None else "?" + f.reported_method_line.strip()
        prev = merged.get(key)
        if prev is None:
            merged[key] = f
            order.append(key)
            continue
        roles = prev.role if f.role in (prev.role, "") else "\n".join(filter(None, [prev.role, f.role]))
        notes = prev.note if f.note in (prev.note, "") else "; ".join(filter(None, [prev.note, f.note]))
        merged[key] = MethodFinding(
            reported_method_line=prev.reported_method_line,
            role=roles,
            confidence=max(prev.confidence, f.confidence),
            resolution=prev.resolution,
            resolved_signature=prev.resolved_signature,
            note=notes,
        )
    return [merged[k] for k in order]
