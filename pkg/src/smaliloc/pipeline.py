"""Baseline and two-phase localization runs over a corpus, and the report they produce."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .behaviors import Behavior
from .errors import GatewayError, InputError
from .evaluation import format_percent, workload_reduction
from .gateway import AuthMissing, AuthRejected, Gateway, GatewayUnconfigured
from .prompts import DEFAULT_TOKEN_BUDGET, PromptEngine, RenderedPrompt
from .responses import (
    UNMATCHED,
    MethodFinding,
    ParseError,
    Phase1Verdict,
    merge_method_findings,
    parse_baseline,
    parse_phase1,
    parse_phase2,
    resolve_entry,
)
from .smali import Corpus, SmaliClass

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MALLOC = "malloc"
BASELINE = "baseline"

_FATAL = (GatewayUnconfigured, AuthMissing, AuthRejected)


class EmptyBehaviorSet(InputError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    gate_threshold: int = 0
    token_budget: int = DEFAULT_TOKEN_BUDGET
    parse_retries: int = 1
    dump_prompts: str | Path | None = None


@dataclass(frozen=True)
class Finding:
    class_name: str
    behavior_id: int
    behavior_name: str
    class_confidence: int
    explanation: str
    methods: tuple[MethodFinding, ...] = ()
    phase1_chunks: int = 1


@dataclass(frozen=True)
class Failure:
    class_name: str
    behavior_id: int | None
    stage: str
    error_type: str
    message: str


@dataclass
class AnalysisReport:
    apk_id: str
    mode: str
    model: str
    findings: list[Finding]
    total_class_count: int
    total_method_count: int
    failures: list[Failure] = field(default_factory=list)
    unrecognized_behaviors: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.findings = sorted(self.findings, key=lambda f: (f.class_name, f.behavior_id))
        self.failures = sorted(self.failures, key=lambda f: (f.class_name, f.behavior_id or 0, f.stage))
        self.unrecognized_behaviors = sorted(set(self.unrecognized_behaviors))

    @property
    def flagged_class_count(self) -> int:
        return len({f.class_name for f in self.findings})

    @property
    def flagged_methods(self) -> set[tuple[str, str]]:
        return {
            (f.class_name, m.resolved_signature)
            for f in self.findings
            for m in f.methods
            if m.resolved_signature is not None
        }

    @property
    def flagged_method_count(self) -> int:
        return len(self.flagged_methods)

    @property
    def workload_reduction(self) -> float:
        return workload_reduction(self.flagged_method_count, self.total_method_count)

    @property
    def parse_failure_count(self) -> int:
        return sum(1 for f in self.failures if f.error_type == "ParseError")


def merge_chunk_verdicts(verdicts: Sequence[Phase1Verdict]) -> Phase1Verdict:
    """OR-combine per-chunk verdicts for one class."""
    if not verdicts:
        raise ValueError("no verdicts to merge")
    if len(verdicts) == 1:
        return verdicts[0]
    n = len(verdicts)
    hits = [(i, v) for i, v in enumerate(verdicts, start=1) if v.is_malicious]
    pool = hits or list(enumerate(verdicts, start=1))
    explanation = "\n\n".join(f"[chunk {i}/{n}] {v.explanation}" for i, v in pool if v.explanation)
    return Phase1Verdict(bool(hits), max(v.confidence for _, v in pool), explanation)


class _Runner:
    def __init__(self, gateway: Gateway, config: PipelineConfig, engine: PromptEngine | None):
        if gateway is None or gateway.backend is None:
            raise GatewayUnconfigured("no LLM backend configured")
        self.gateway = gateway
        self.config = config
        self.engine = engine or PromptEngine(token_budget=config.token_budget)
        self.dump_dir = Path(config.dump_prompts) if config.dump_prompts else None
        if self.dump_dir:
            self.dump_dir.mkdir(parents=True, exist_ok=True)

    def ask(self, prompt: RenderedPrompt, parser: Callable[[str], object]):
        self._dump(prompt)
        request = self.gateway.request(prompt.text)
        raw = self.gateway.complete(request).text
        for retry in range(self.config.parse_retries + 1):
            try:
                return parser(raw)
            except ParseError:
                if retry == self.config.parse_retries:
                    raise
                log.info("unparseable %s reply for %s; asking again", prompt.kind, prompt.class_name)
                raw = self.gateway.complete(request, refresh=True).text

    def _dump(self, p: RenderedPrompt) -> None:
        if self.dump_dir is None:
            return
        safe = re.sub(r"[^A-Za-z0-9_.-]+", "_", p.class_name).strip("_")
        bid = f"b{p.behavior_id:02d}" if p.behavior_id is not None else "ball"
        name = f"{safe}__{bid}__{p.kind}__c{p.chunk_index}of{p.chunk_count}.txt"
        (self.dump_dir / name).write_text(p.text, encoding="utf-8")

    def fan_out(self, keys: list, work: Callable, progress: Callable[[str], None] | None):
        """Run ``work(key)`` for every key with at most ``max_in_flight`` in parallel."""
        results = {}
        pool = ThreadPoolExecutor(max_workers=self.gateway.max_in_flight)
        try:
            futures = {key: pool.submit(work, key) for key in keys}
            for key in keys:
                results[key] = futures[key].result()
                if progress:
                    progress(f"done {key[0]} behavior={key[1]}")
        finally:
            pool.shutdown(wait=True, cancel_futures=True)
        return results


def _failure(class_name: str, behavior_id: int | None, stage: str, exc: Exception) -> Failure:
    return Failure(class_name, behavior_id, stage, type(exc).__name__, str(exc))


def run_malloc(
    corpus: Corpus,
    behaviors: Sequence[Behavior],
    gateway: Gateway,
    config: PipelineConfig = PipelineConfig(),
    engine: PromptEngine | None = None,
    progress: Callable[[str], None] | None = None,
) -> AnalysisReport:
    """Two-phase localization over every (developer class, behavior) pair.

    Phase 1 screens the class for one behavior. Only a malicious verdict at
    or above ``gate_threshold`` reaches Phase 2, which is seeded with the
    Phase-1 explanation and lists the methods involved.
    """
    if not behaviors:
        raise EmptyBehaviorSet("no behaviors selected for analysis")
    runner = _Runner(gateway, config, engine)
    classes = {c.class_name: c for c in corpus.developer_classes}
    by_id = {b.id: b for b in behaviors}
    keys = [(c, b) for c in sorted(classes) for b in sorted(by_id)]

    def work(key):
        cls, behavior = classes[key[0]], by_id[key[1]]
        try:
            return _malloc_pair(runner, cls, behavior)
        except _FATAL:
            raise
        except (ParseError, GatewayError) as exc:
            return None, [_failure(cls.class_name, behavior.id, "phase1", exc)]

    results = runner.fan_out(keys, work, progress)
    findings, failures = [], []
    for key in keys:
        finding, fails = results[key]
        if finding is not None:
            findings.append(finding)
        failures.extend(fails)
    return AnalysisReport(
        apk_id=corpus.apk_id,
        mode=MALLOC,
        model=gateway.model,
        findings=findings,
        total_class_count=len(classes),
        total_method_count=corpus.method_count,
        failures=failures,
    )


def _malloc_pair(runner: _Runner, cls: SmaliClass, behavior: Behavior):
    prompts = runner.engine.phase1(cls, behavior)
    verdict = merge_chunk_verdicts([runner.ask(p, parse_phase1) for p in prompts])
    if not verdict.is_malicious or verdict.confidence < runner.config.gate_threshold:
        return None, []

    failures: list[Failure] = []
    methods: list[MethodFinding] = []
    try:
        for p in runner.engine.phase2(cls, verdict.explanation, behavior.id):
            entries = runner.ask(p, parse_phase2)
            methods.extend(resolve_entry(e, cls) for e in entries)
    except _FATAL:
        raise
    except (ParseError, GatewayError) as exc:
        failures.append(_failure(cls.class_name, behavior.id, "phase2", exc))
    finding = Finding(
        class_name=cls.class_name,
        behavior_id=behavior.id,
        behavior_name=behavior.name,
        class_confidence=verdict.confidence,
        explanation=verdict.explanation,
        methods=tuple(merge_method_findings(methods)),
        phase1_chunks=len(prompts),
    )
    return finding, failures


def run_baseline(
    corpus: Corpus,
    taxonomy: Sequence[Behavior],
    gateway: Gateway,
    config: PipelineConfig = PipelineConfig(),
    engine: PromptEngine | None = None,
    progress: Callable[[str], None] | None = None,
) -> AnalysisReport:
    """One all-behaviors prompt per class; a verdict naming k behaviors yields k findings."""
    if not taxonomy:
        raise EmptyBehaviorSet("empty taxonomy")
    runner = _Runner(gateway, config, engine)
    classes = {c.class_name: c for c in corpus.developer_classes}
    by_id = {b.id: b for b in taxonomy}
    names = [by_id[i].name if i in by_id else "" for i in range(1, max(by_id) + 1)]
    keys = [(c, None) for c in sorted(classes)]

    def parser(raw):
        return parse_baseline(raw, names)

    def work(key):
        cls = classes[key[0]]
        try:
            verdicts = [runner.ask(p, parser) for p in runner.engine.baseline(cls, taxonomy)]
        except _FATAL:
            raise
        except (ParseError, GatewayError) as exc:
            return [], [_failure(cls.class_name, None, "baseline", exc)], []
        return _baseline_findings(runner, cls, verdicts, by_id)

    results = runner.fan_out(keys, work, progress)
    findings, failures, unknown = [], [], []
    for key in keys:
        f, fl, u = results[key]
        findings.extend(f)
        failures.extend(fl)
        unknown.extend(u)
    return AnalysisReport(
        apk_id=corpus.apk_id,
        mode=BASELINE,
        model=gateway.model,
        findings=findings,
        total_class_count=len(classes),
        total_method_count=corpus.method_count,
        failures=failures,
        unrecognized_behaviors=unknown,
    )


def _baseline_findings(runner: _Runner, cls: SmaliClass, verdicts, by_id):
    merged = merge_chunk_verdicts([Phase1Verdict(v.is_malicious, v.confidence, v.explanation) for v in verdicts])
    if not merged.is_malicious or merged.confidence < runner.config.gate_threshold:
        return [], [], []
    hits = [v for v in verdicts if v.is_malicious]
    ids = sorted({i for v in hits for i in v.behavior_ids})
    unknown = [(cls.class_name, name) for v in hits for name in v.unrecognized_behaviors]
    methods = tuple(merge_method_findings([resolve_entry(e, cls) for v in hits for e in v.methods]))
    findings = [
        Finding(
            class_name=cls.class_name,
            behavior_id=i,
            behavior_name=by_id[i].name,
            class_confidence=merged.confidence,
            explanation=merged.explanation,
            methods=methods,
            phase1_chunks=len(verdicts),
        )
        for i in ids
    ]
    failures = []
    if not ids:
        failures.append(
            Failure(cls.class_name, None, "baseline", "NoRecognizedBehavior", "malicious verdict names no known behavior")
        )
    return findings, failures, unknown


# -- serialization -----------------------------------------------------------


def report_to_dict(report: AnalysisReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "apk_id": report.apk_id,
        "mode": report.mode,
        "model": report.model,
        "summary": {
            "total_class_count": report.total_class_count,
            "total_method_count": report.total_method_count,
            "flagged_class_count": report.flagged_class_count,
            "flagged_method_count": report.flagged_method_count,
            "workload_reduction": round(report.workload_reduction, 6),
        },
        "findings": [
            {
                "class_name": f.class_name,
                "behavior_id": f.behavior_id,
                "behavior_name": f.behavior_name,
                "class_confidence": f.class_confidence,
                "phase1_chunks": f.phase1_chunks,
                "explanation": f.explanation,
                "methods": [
                    {
                        "reported_method_line": m.reported_method_line,
                        "resolution": m.resolution,
                        "resolved_signature": m.resolved_signature,
                        "confidence": m.confidence,
                        "role": m.role,
                        "note": m.note,
                    }
                    for m in f.methods
                ],
            }
            for f in report.findings
        ],
        "failures": [
            {
                "class_name": f.class_name,
                "behavior_id": f.behavior_id,
                "stage": f.stage,
                "error_type": f.error_type,
                "message": f.message,
            }
            for f in report.failures
        ],
        "unrecognized_behaviors": [{"class_name": c, "name": n} for c, n in report.unrecognized_behaviors],
    }


def dumps_report(report: AnalysisReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, ensure_ascii=False) + "\n"


def loads_report(text: str) -> AnalysisReport:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"report is not valid JSON: {exc}") from exc
    if data.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise InputError(f"unsupported report schema_version {data.get('schema_version')!r}")
    try:
        findings = [
            Finding(
                class_name=f["class_name"],
                behavior_id=f["behavior_id"],
                behavior_name=f["behavior_name"],
                class_confidence=f["class_confidence"],
                explanation=f["explanation"],
                phase1_chunks=f["phase1_chunks"],
                methods=tuple(MethodFinding(**m) for m in f["methods"]),
            )
            for f in data["findings"]
        ]
        summary = data["summary"]
        return AnalysisReport(
            apk_id=data["apk_id"],
            mode=data["mode"],
            model=data["model"],
            findings=findings,
            total_class_count=summary["total_class_count"],
            total_method_count=summary["total_method_count"],
            failures=[Failure(**f) for f in data.get("failures", [])],
            unrecognized_behaviors=[(u["class_name"], u["name"]) for u in data.get("unrecognized_behaviors", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed report: {exc}") from exc


def load_report(path: str | Path) -> AnalysisReport:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"report not found: {path}")
    return loads_report(path.read_text(encoding="utf-8"))


def render_digest(report: AnalysisReport) -> str:
    """Analyst-facing text: class, behavior, then each method with its role."""
    out = [
        f"APK: {report.apk_id}  mode: {report.mode}  model: {report.model}",
        f"Flagged: {report.flagged_class_count} of {report.total_class_count} classes, "
        f"{report.flagged_method_count} of {report.total_method_count} methods "
        f"(workload reduction {format_percent(report.workload_reduction)})",
        "",
    ]
    for f in report.findings:
        out.append(f"Class: {f.class_name}")
        out.append(f"Behavior: {f.behavior_name} (confidence {f.class_confidence})")
        out.append(f"Explanation: {f.explanation}")
        for m in f.methods:
            tag = "" if m.resolution != UNMATCHED else "  [unmatched]"
            out.append(f"  Method: {m.resolved_signature or m.reported_method_line}{tag}")
            out.append("  Role Explanation: " + m.role.replace("\n", "\n    "))
        out.append("")
    if report.failures:
        out.append("Failures:")
        for fl in report.failures:
            bid = fl.behavior_id if fl.behavior_id is not None else "-"
            out.append(f"  {fl.class_name} behavior={bid} stage={fl.stage}: {fl.error_type}: {fl.message}")
        out.append("")
    return "\n".join(out)
