"""Smali corpus ingestion: file parsing, tree walking, decompiler invocation."""

from __future__ import annotations

import fnmatch
import json
import logging
import re
import shlex
import subprocess
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import InputError

log = logging.getLogger(__name__)

CORPUS_SCHEMA_VERSION = 1

SYNTHETIC_NAME_PATTERNS: tuple[str, ...] = (
    "lambda$*",
    "*$lambda$*",
    "-$$Nest$*",
    "access$*",
)

# Each regex extracts the name of the method a synthetic companion was lowered from.
_ANCHOR_EXTRACTORS = (
    re.compile(r"^lambda\$(.+?)\$\d+$"),
    re.compile(r"^(.+?)\$lambda\$"),
    re.compile(r"^-\$\$Nest\$m(.+)$"),
    re.compile(r"^access\$(.*?[^\d$].*?)(?:\$\d+)?$"),
)

_LINE_RE = re.compile(r"[^\n]*\n|[^\n]+$")


class SmaliParseError(InputError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = path or "<text>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


class MissingClassDirective(SmaliParseError):
    pass


class UnterminatedMethod(SmaliParseError):
    pass


class NestedMethod(SmaliParseError):
    pass


class EmptyCorpus(InputError):
    pass


class DecompileError(InputError):
    pass


class ToolNotConfigured(DecompileError):
    pass


class ToolFailed(DecompileError):
    def __init__(self, message: str, returncode: int, stderr: str):
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"{message} (exit {returncode}): {stderr.strip()}")


class NoSmaliProduced(DecompileError):
    pass


@dataclass(frozen=True)
class SmaliMethod:
    signature_line: str
    name: str
    descriptor: str
    modifiers: frozenset[str]
    body_text: str
    line_span: tuple[int, int]
    is_synthetic: bool

    @property
    def name_and_descriptor(self) -> str:
        return self.name + self.descriptor


@dataclass(frozen=True)
class SmaliClass:
    class_name: str
    source_path: str
    super_name: str
    methods: tuple[SmaliMethod, ...]
    raw_text: str
    is_developer_code: bool = True

    @property
    def header(self) -> str:
        """Everything before the first ``.method`` line."""
        if not self.methods:
            return self.raw_text
        lines = _split_lines(self.raw_text)
        return "".join(lines[: self.methods[0].line_span[0] - 1])

    def method_segments(self) -> list[str]:
        """Per-method text slices that, appended to ``header``, rebuild ``raw_text``.

        A segment runs from its ``.method`` line up to the next method's
        ``.method`` line (or end of file), so interstitial fields and comments
        ride along with the preceding method.
        """
        lines = _split_lines(self.raw_text)
        starts = [m.line_span[0] - 1 for m in self.methods] + [len(lines)]
        return ["".join(lines[a:b]) for a, b in zip(starts, starts[1:])]

    def find_method(self, signature_line: str) -> SmaliMethod | None:
        for m in self.methods:
            if m.signature_line == signature_line:
                return m
        return None


@dataclass(frozen=True)
class Corpus:
    apk_id: str
    family: str | None
    classes: tuple[SmaliClass, ...]
    filter_prefixes: tuple[str, ...] = ()

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def developer_classes(self) -> list[SmaliClass]:
        return [c for c in self.classes if c.is_developer_code]

    @property
    def method_count(self) -> int:
        return sum(len(c.methods) for c in self.developer_classes)

    def get(self, class_name: str) -> SmaliClass:
        for c in self.classes:
            if c.class_name == class_name:
                return c
        raise KeyError(class_name)


@dataclass
class MethodGroup:
    anchor: SmaliMethod
    companions: list[SmaliMethod] = field(default_factory=list)

    @property
    def methods(self) -> list[SmaliMethod]:
        return [self.anchor, *self.companions]

    def __len__(self) -> int:
        return 1 + len(self.companions)


def _split_lines(text: str) -> list[str]:
    return _LINE_RE.findall(text)


def is_synthetic_name(name: str, patterns: Iterable[str] = SYNTHETIC_NAME_PATTERNS) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def _parse_method_line(stripped: str, path: str | None, lineno: int) -> tuple[str, str, frozenset[str]]:
    tokens = stripped.split()[1:]
    if not tokens or "(" not in tokens[-1]:
        raise SmaliParseError(f"malformed method directive: {stripped!r}", path, lineno)
    target = tokens[-1]
    paren = target.index("(")
    return target[:paren], target[paren:], frozenset(tokens[:-1])


def parse_smali_file(
    text: str,
    path: str = "<text>",
    synthetic_patterns: Sequence[str] = SYNTHETIC_NAME_PATTERNS,
) -> SmaliClass:
    """Parse one ``.smali`` file into a :class:`SmaliClass`.

    Only ``.class``, ``.super`` and ``.method``/``.end method`` are modeled;
    every other directive survives untouched inside ``raw_text``.
    """
    class_name: str | None = None
    super_name = ""
    methods: list[SmaliMethod] = []
    open_start: int | None = None
    open_line = ""
    body: list[str] = []

    for lineno, line in enumerate(_split_lines(text), start=1):
        stripped = line.strip()
        if open_start is not None:
            if stripped == ".end method":
                name, descriptor, modifiers = _parse_method_line(open_line, path, open_start)
                methods.append(
                    SmaliMethod(
                        signature_line=open_line,
                        name=name,
                        descriptor=descriptor,
                        modifiers=modifiers,
                        body_text="".join(body),
                        line_span=(open_start, lineno),
                        is_synthetic="synthetic" in modifiers or is_synthetic_name(name, synthetic_patterns),
                    )
                )
                open_start = None
                body = []
            elif _is_directive(stripped, ".method"):
                raise NestedMethod("'.method' inside an open method", path, lineno)
            else:
                body.append(line)
            continue

        if _is_directive(stripped, ".method"):
            open_start, open_line = lineno, stripped
        elif _is_directive(stripped, ".class"):
            if class_name is not None:
                raise SmaliParseError("duplicate '.class' directive", path, lineno)
            class_name = stripped.split()[-1]
        elif _is_directive(stripped, ".super"):
            super_name = stripped.split()[-1]

    if open_start is not None:
        raise UnterminatedMethod(f"'.method' without '.end method': {open_line!r}", path, open_start)
    if class_name is None:
        raise MissingClassDirective("no '.class' directive", path)
    return SmaliClass(
        class_name=class_name,
        source_path=path,
        super_name=super_name,
        methods=tuple(methods),
        raw_text=text,
    )


def _is_directive(stripped: str, directive: str) -> bool:
    return stripped == directive or stripped.startswith(directive + " ") or stripped.startswith(directive + "\t")


def normalize_prefix(prefix: str) -> str:
    """Accept ``Lcom/demo/`` or ``com.demo`` and return the internal form."""
    prefix = prefix.strip()
    if prefix.startswith("L") and "/" in prefix:
        return prefix
    return "L" + prefix.replace(".", "/").rstrip("/") + "/"


def ingest_tree(
    root: str | Path,
    filter: Sequence[str] | None = None,
    apk_id: str | None = None,
    family: str | None = None,
    synthetic_patterns: Sequence[str] = SYNTHETIC_NAME_PATTERNS,
) -> Corpus:
    """Parse every ``*.smali`` file below ``root`` into a :class:`Corpus`.

    Multiple ``smali_classesN`` roots under ``root`` merge into one corpus.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"not a directory: {root}")
    files = sorted(root.rglob("*.smali"))
    if not files:
        raise EmptyCorpus(f"no .smali files under {root}")

    prefixes = tuple(normalize_prefix(p) for p in filter) if filter else ()
    by_name: dict[str, SmaliClass] = {}
    for f in files:
        rel = f.relative_to(root).as_posix()
        text = f.read_bytes().decode("utf-8")
        cls = parse_smali_file(text, rel, synthetic_patterns)
        if cls.class_name in by_name:
            raise InputError(
                f"{rel}: class {cls.class_name} already defined in {by_name[cls.class_name].source_path}"
            )
        dev = not prefixes or cls.class_name.startswith(prefixes)
        by_name[cls.class_name] = replace(cls, is_developer_code=dev)
    log.debug("parsed %d smali files under %s", len(files), root)
    return Corpus(
        apk_id=apk_id or root.resolve().name,
        family=family,
        classes=tuple(by_name[k] for k in sorted(by_name)),
        filter_prefixes=prefixes,
    )


def decompile(apk: str | Path, tool_command: str | None, out_dir: str | Path) -> Path:
    """Run an external decompiler such as ``apktool d {apk} -o {out} -f``."""
    if not tool_command:
        raise ToolNotConfigured("no decompiler command configured")
    if "{apk}" not in tool_command or "{out}" not in tool_command:
        raise ToolNotConfigured("decompiler command must contain {apk} and {out} placeholders")
    out_dir = Path(out_dir)
    argv = build_decompile_argv(tool_command, str(apk), str(out_dir))
    log.info("decompiling: %s", shlex.join(argv))
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except FileNotFoundError as exc:
        raise ToolFailed("decompiler not found", 127, str(exc)) from exc
    if proc.returncode != 0:
        raise ToolFailed(f"decompiler failed on {apk}", proc.returncode, proc.stderr)
    if not out_dir.is_dir() or not any(out_dir.rglob("*.smali")):
        raise NoSmaliProduced(f"decompiler produced no .smali files in {out_dir}")
    return out_dir


def build_decompile_argv(tool_command: str, apk: str, out: str) -> list[str]:
    return [tok.replace("{apk}", apk).replace("{out}", out) for tok in shlex.split(tool_command)]


def _anchor_name(name: str) -> str | None:
    for rx in _ANCHOR_EXTRACTORS:
        m = rx.match(name)
        if m:
            return m.group(1)
    return None


def group_synthetic_methods(cls: SmaliClass) -> list[MethodGroup]:
    """Partition methods into anchor + compiler-generated companion groups.

    A synthetic method attaches to the first non-synthetic method whose name
    is embedded in its own (``lambda$foo$0``, ``foo$lambda$1``,
    ``-$$Nest$mfoo``, ``access$foo``). Anything else stands alone.
    """
    anchors: dict[str, MethodGroup] = {}
    groups: list[MethodGroup] = []
    for m in cls.methods:
        if not m.is_synthetic:
            g = MethodGroup(m)
            groups.append(g)
            anchors.setdefault(m.name, g)

    for m in cls.methods:
        if not m.is_synthetic:
            continue
        target = _anchor_name(m.name)
        if target is not None and target in anchors:
            anchors[target].companions.append(m)
        else:
            groups.append(MethodGroup(m))

    groups.sort(key=lambda g: g.anchor.line_span[0])
    return groups


# -- serialization -----------------------------------------------------------


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "schema_version": CORPUS_SCHEMA_VERSION,
        "apk_id": corpus.apk_id,
        "family": corpus.family,
        "filter": list(corpus.filter_prefixes),
        "class_count": corpus.class_count,
        "method_count": corpus.method_count,
        "classes": [
            {
                "class_name": c.class_name,
                "source_path": c.source_path,
                "super_name": c.super_name,
                "is_developer_code": c.is_developer_code,
                "methods": [
                    {
                        "signature_line": m.signature_line,
                        "line_span": list(m.line_span),
                        "is_synthetic": m.is_synthetic,
                    }
                    for m in c.methods
                ],
                "raw_text": c.raw_text,
            }
            for c in corpus.classes
        ],
    }


def dumps_corpus(corpus: Corpus) -> str:
    return json.dumps(corpus_to_dict(corpus), indent=2, ensure_ascii=False) + "\n"


def loads_corpus(text: str, synthetic_patterns: Sequence[str] = SYNTHETIC_NAME_PATTERNS) -> Corpus:
    """Rebuild a corpus from :func:`dumps_corpus` output by re-parsing each class."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"corpus file is not valid JSON: {exc}") from exc
    if data.get("schema_version") != CORPUS_SCHEMA_VERSION:
        raise InputError(f"unsupported corpus schema_version {data.get('schema_version')!r}")
    classes = []
    for entry in data["classes"]:
        cls = parse_smali_file(entry["raw_text"], entry["source_path"], synthetic_patterns)
        classes.append(replace(cls, is_developer_code=entry["is_developer_code"]))
    return Corpus(
        apk_id=data["apk_id"],
        family=data.get("family"),
        classes=tuple(classes),
        filter_prefixes=tuple(data.get("filter", ())),
    )


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"corpus file not found: {path}")
    return loads_corpus(path.read_text(encoding="utf-8"))


def summarize(corpus: Corpus) -> str:
    dev = corpus.developer_classes
    lines = [
        f"apk_id: {corpus.apk_id}",
        f"family: {corpus.family or '-'}",
        f"classes: {corpus.class_count}",
        f"developer_classes: {len(dev)}",
        f"methods: {corpus.method_count}",
        f"synthetic_methods: {sum(m.is_synthetic for c in dev for m in c.methods)}",
    ]
    return "\n".join(lines) + "\n"
