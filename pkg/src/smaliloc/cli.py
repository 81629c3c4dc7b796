"""Command-line entry point: ingest, analyze, baseline, eval, review, report, dump-prompts."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from . import __version__
from .behaviors import load_family_table, load_taxonomy, lookup_family
from .config import BACKENDS, RunConfig, load_config
from .errors import EXIT_OK, EXIT_PARSE_BUDGET, EXIT_USAGE, InputError, SmalilocError
from .evaluation import (
    COMPONENT,
    PAIR,
    format_table,
    load_ground_truth,
    metrics_to_dict,
    score,
    score_from_verdicts,
)
from .gateway import Gateway, HttpBackend, MockBackend, ReplayBackend, ReplayStore, RetryPolicy
from .pipeline import (
    BASELINE,
    MALLOC,
    PipelineConfig,
    dumps_report,
    load_report,
    render_digest,
    run_baseline,
    run_malloc,
)
from .prompts import PromptEngine, load_templates
from .review import VerdictStore, load_verdicts, review_loop
from .smali import decompile, dumps_corpus, ingest_tree, load_corpus, summarize

log = logging.getLogger("smaliloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- shared helpers ----------------------------------------------------------


def _config(args) -> RunConfig:
    overrides = {
        "backend": getattr(args, "backend", None),
        "model": getattr(args, "model", None),
        "base_url": getattr(args, "base_url", None),
        "temperature": getattr(args, "temperature", None),
        "max_in_flight": getattr(args, "max_in_flight", None),
        "gate_threshold": getattr(args, "gate_threshold", None),
        "token_budget": getattr(args, "token_budget", None),
        "taxonomy": getattr(args, "taxonomy", None),
        "families": getattr(args, "families", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "mock_script": getattr(args, "mock_script", None),
        "max_parse_failures": getattr(args, "max_parse_failures", None),
        "decompiler": getattr(args, "decompiler", None),
        "filter": tuple(args.filter) if getattr(args, "filter", None) else None,
    }
    return load_config(getattr(args, "config", None), overrides)


def build_gateway(cfg: RunConfig, run_log: Path | None = None) -> Gateway:
    if cfg.backend == "mock":
        backend = MockBackend.from_file(cfg.mock_script)
    elif cfg.backend == "replay":
        backend = ReplayBackend(ReplayStore(cfg.cache_dir))
    else:
        backend = HttpBackend(cfg.base_url, cfg.api_key_env)
    return Gateway(
        backend=backend,
        model=cfg.model,
        temperature=cfg.temperature,
        max_output_tokens=cfg.max_output_tokens,
        cache_dir=cfg.cache_dir if cfg.backend != "replay" else None,
        max_in_flight=cfg.max_in_flight,
        retry=RetryPolicy(cfg.max_attempts, cfg.base_delay, cfg.jitter),
        min_interval=cfg.min_interval,
        run_log=run_log,
    )


def _engine(cfg: RunConfig) -> PromptEngine:
    return PromptEngine(load_templates(cfg.templates), cfg.token_budget)


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")


def _add_gateway_flags(p: argparse.ArgumentParser) -> None:
    _add_config(p)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--model")
    p.add_argument("--base-url")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-in-flight", type=int)
    p.add_argument("--cache-dir", help="replay cache directory (written by live backends, read by replay)")
    p.add_argument("--mock-script", help="YAML script for the mock backend")
    p.add_argument("--gate-threshold", type=int, help="minimum phase-1 confidence that proceeds to phase 2")
    p.add_argument("--token-budget", type=int)
    p.add_argument("--taxonomy", help="behaviors YAML (default: bundled)")
    p.add_argument("--max-parse-failures", type=int, help="exit 4 when more replies than this fail to parse")
    p.add_argument("--dump-prompts", metavar="DIR", help="also write every rendered prompt to DIR")
    p.add_argument("-o", "--output", required=True, help="report file to write")


# -- subcommands -------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = _config(args)
    source = Path(args.source)
    if source.is_file():
        work = Path(args.work_dir) if args.work_dir else Path(tempfile.mkdtemp(prefix="smaliloc-"))
        source = decompile(source, cfg.decompiler, work)
    elif not source.exists():
        raise InputError(f"no such file or directory: {args.source}")
    corpus = ingest_tree(source, cfg.filter or None, args.apk_id or Path(args.source).stem, args.family)
    Path(args.output).write_text(dumps_corpus(corpus), encoding="utf-8")
    sys.stdout.write(summarize(corpus))
    return EXIT_OK


def _analysis(args, mode: str) -> int:
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    taxonomy = load_taxonomy(cfg.taxonomy)
    out = Path(args.output)
    gateway = build_gateway(cfg, run_log=out.with_name(out.name + ".log.jsonl"))
    pconf = PipelineConfig(cfg.gate_threshold, cfg.token_budget, cfg.parse_retries, args.dump_prompts)

    def progress(msg: str) -> None:
        if args.verbose:
            _err(f"[{mode}] {msg}")

    if mode == MALLOC:
        if args.behavior:
            by_id = {b.id: b for b in taxonomy}
            unknown = sorted(set(args.behavior) - set(by_id))
            if unknown:
                raise InputError(f"unknown behavior ids {unknown}")
            behaviors = [by_id[i] for i in sorted(set(args.behavior))]
        else:
            table = load_family_table(cfg.families)
            behaviors = lookup_family(table, args.family or corpus.family, taxonomy)
        report = run_malloc(corpus, behaviors, gateway, pconf, _engine(cfg), progress)
    else:
        report = run_baseline(corpus, taxonomy, gateway, pconf, _engine(cfg), progress)

    out.write_text(dumps_report(report), encoding="utf-8")
    s = gateway.stats
    _err(
        f"gateway: backend_calls={s.backend_calls} http_calls={s.http_calls} "
        f"cache_hits={s.cache_hits} peak_in_flight={s.peak_in_flight}"
    )
    _err(
        f"wrote {out}: {len(report.findings)} findings, {report.flagged_method_count} methods flagged, "
        f"{len(report.failures)} failures"
    )
    if cfg.max_parse_failures is not None and report.parse_failure_count > cfg.max_parse_failures:
        _err(f"parse failures ({report.parse_failure_count}) exceed budget ({cfg.max_parse_failures})")
        return EXIT_PARSE_BUDGET
    return EXIT_OK


def cmd_analyze(args) -> int:
    return _analysis(args, MALLOC)


def cmd_baseline(args) -> int:
    return _analysis(args, BASELINE)


def cmd_eval(args) -> int:
    report = load_report(args.report)
    if args.truth:
        c, m = score(report, load_ground_truth(args.truth), args.count_unit)
    else:
        c, m = score_from_verdicts(report, load_verdicts(args.from_verdicts, report.apk_id))
    if args.json:
        sys.stdout.write(json.dumps(metrics_to_dict(c, m), indent=2) + "\n")
    else:
        sys.stdout.write(format_table([(report.mode, report.model, c, m)]))
    return EXIT_OK


def cmd_review(args) -> int:
    report = load_report(args.report)
    store = VerdictStore(args.verdicts, report.apk_id)
    outcome = review_loop(report, store)
    _err(
        f"{outcome.decided} decided, {outcome.skipped} skipped"
        + (f", {outcome.remaining} left for next session" if outcome.quit else "")
    )
    return EXIT_OK


def cmd_report(args) -> int:
    report = load_report(args.report)
    if args.format == "json":
        sys.stdout.write(dumps_report(report))
    else:
        sys.stdout.write(render_digest(report))
    return EXIT_OK


def cmd_dump_prompts(args) -> int:
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    taxonomy = load_taxonomy(cfg.taxonomy)
    engine = _engine(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == BASELINE:
        prompts = [p for c in corpus.developer_classes for p in engine.baseline(c, taxonomy)]
    else:
        ids = set(args.behavior or [b.id for b in taxonomy])
        prompts = [p for c in corpus.developer_classes for b in taxonomy if b.id in ids for p in engine.phase1(c, b)]
    for i, p in enumerate(prompts, start=1):
        bid = f"b{p.behavior_id:02d}" if p.behavior_id is not None else "ball"
        (out / f"{i:05d}_{p.kind}_{bid}_c{p.chunk_index}of{p.chunk_count}.txt").write_text(p.text, encoding="utf-8")
    _err(f"wrote {len(prompts)} prompts to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smaliloc", description="Localize malicious payloads in Smali code with an LLM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse a Smali tree (or decompile an APK) into a corpus file")
    _add_config(p)
    p.add_argument("source", help="directory of .smali files, or an APK when a decompiler is configured")
    p.add_argument("--filter", action="append", help="developer-code package prefix, e.g. Lcom/demo/ (repeatable)")
    p.add_argument("--apk-id")
    p.add_argument("--family")
    p.add_argument("--decompiler", help="command template with {apk} and {out}, e.g. 'apktool d {apk} -o {out} -f'")
    p.add_argument("--work-dir", help="where the decompiler writes its output")
    p.add_argument("-o", "--output", default="corpus.json")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("analyze", help="two-phase localization")
    p.add_argument("corpus")
    _add_gateway_flags(p)
    p.add_argument("--behavior", type=int, action="append", help="behavior id to probe (repeatable)")
    p.add_argument("--family", help="family label overriding the corpus one")
    p.add_argument("--families", help="family lookup table YAML (default: bundled)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("baseline", help="single-prompt baseline")
    p.add_argument("corpus")
    _add_gateway_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score a report")
    p.add_argument("report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--truth", help="ground-truth JSON")
    src.add_argument("--from-verdicts", help="analyst verdict file (precision only)")
    p.add_argument("--count-unit", choices=(PAIR, COMPONENT), default=PAIR)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("review", help="interactively accept or reject findings")
    p.add_argument("report")
    p.add_argument("verdicts", help="verdict file; created if missing, resumed if present")
    p.set_defaults(func=cmd_review)

    p = sub.add_parser("report", help="print a report")
    p.add_argument("report")
    p.add_argument("--format", choices=("digest", "json"), default="digest")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-prompts", help="write the rendered first-stage prompts to a directory")
    _add_config(p)
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=(MALLOC, BASELINE), default=MALLOC)
    p.add_argument("--behavior", type=int, action="append")
    p.add_argument("--taxonomy")
    p.add_argument("--token-budget", type=int)
    p.set_defaults(func=cmd_dump_prompts)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SmalilocError as exc:
        _err(f"error: {exc}")
        return exc.exit_code
    except KeyboardInterrupt:
        _err("interrupted")
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
