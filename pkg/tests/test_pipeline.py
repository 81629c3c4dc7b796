import json

import pytest

from smaliloc.gateway import AuthMissing, Gateway, GatewayUnconfigured, MockBackend, MockRule
from smaliloc.pipeline import (
    AnalysisReport,
    EmptyBehaviorSet,
    Finding,
    PipelineConfig,
    dumps_report,
    loads_report,
    merge_chunk_verdicts,
    render_digest,
    run_baseline,
    run_malloc,
)
from smaliloc.responses import EXACT, UNMATCHED, MethodFinding, Phase1Verdict
from smaliloc.smali import Corpus, parse_smali_file

BENIGN = "IS_MALICIOUS: no\nCONFIDENCE: 90\nEXPLANATION: benign"


def make_class(name: str, n_methods: int):
    body = "".join(f".method public m{i}()V\n    return-void\n.end method\n\n" for i in range(n_methods))
    return parse_smali_file(f".class public L{name};\n.super Ljava/lang/Object;\n\n{body}", f"{name}.smali")


def make_corpus(sizes: dict[str, int]) -> Corpus:
    return Corpus("synthetic", None, tuple(make_class(n, k) for n, k in sorted(sizes.items())))


def malicious(cls: str, methods: list[str], conf: int = 80, behavior: str | None = None) -> list[MockRule]:
    contains = (behavior,) if behavior else ()
    p2 = "".join(f"METHOD: .method public {m}()V\nROLE: does {m}\nCONFIDENCE: 70\n" for m in methods)
    return [
        MockRule(f"IS_MALICIOUS: yes\nCONFIDENCE: {conf}\nEXPLANATION: {cls} is bad", f"L{cls};", "phase1", contains),
        MockRule(p2, f"L{cls};", "phase2"),
    ]


def gateway(rules, default=BENIGN, **kw):
    return Gateway(MockBackend(rules, default), **kw)


def test_three_malicious_classes(taxonomy):
    corpus = make_corpus({"A": 3, "B": 4, "C": 2, "D": 5})
    rules = malicious("A", ["m1", "m2"]) + malicious("B", ["m3"]) + malicious("C", [])
    report = run_malloc(corpus, [taxonomy[0]], gateway(rules))
    assert [(f.class_name, f.behavior_id) for f in report.findings] == [("LA;", 1), ("LB;", 1), ("LC;", 1)]
    assert report.flagged_method_count == 3
    assert report.flagged_class_count == 3
    assert report.total_method_count == 14
    assert report.failures == []


def test_all_benign(taxonomy):
    report = run_malloc(make_corpus({"A": 3, "B": 2}), taxonomy, gateway([]))
    assert report.findings == [] and report.workload_reduction == 1.0


def test_twenty_two_of_one_sixty_five(taxonomy):
    sizes = {f"K{i:02d}": 15 for i in range(11)}
    corpus = make_corpus(sizes)
    assert corpus.method_count == 165
    rules = malicious("K00", [f"m{i}" for i in range(11)]) + malicious("K01", [f"m{i}" for i in range(11)])
    report = run_malloc(corpus, [taxonomy[0]], gateway(rules))
    assert report.flagged_method_count == 22
    assert report.workload_reduction == pytest.approx(0.8667, abs=1e-4)
    assert "(workload reduction 87%)" in render_digest(report)


def test_only_developer_classes_are_sent(demo_corpus, taxonomy):
    backend = MockBackend([], BENIGN)
    run_malloc(demo_corpus, [taxonomy[0]], Gateway(backend))
    assert backend.calls == len(demo_corpus.developer_classes) == 12


def test_gate_threshold(taxonomy):
    corpus = make_corpus({"A": 2, "B": 2})
    rules = malicious("A", ["m0"], conf=40) + malicious("B", ["m1"], conf=60)
    report = run_malloc(corpus, [taxonomy[0]], gateway(rules), PipelineConfig(gate_threshold=50))
    assert [f.class_name for f in report.findings] == ["LB;"]


def test_per_pair_phase2(taxonomy):
    corpus = make_corpus({"A": 3})
    rules = [
        MockRule("IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: steals data", "LA;", "phase1", ("Privacy Stealing",)),
        MockRule("IS_MALICIOUS: yes\nCONFIDENCE: 60\nEXPLANATION: hides icon", "LA;", "phase1", ("Tricky Behavior",)),
        MockRule("METHOD: .method public m0()V\nROLE: steal\nCONFIDENCE: 90", "LA;", "phase2", ("steals data",)),
        MockRule("METHOD: .method public m2()V\nROLE: hide\nCONFIDENCE: 50", "LA;", "phase2", ("hides icon",)),
    ]
    report = run_malloc(corpus, [taxonomy[0], taxonomy[10]], gateway(rules))
    got = {f.behavior_id: [m.resolved_signature for m in f.methods] for f in report.findings}
    assert got == {1: [".method public m0()V"], 11: [".method public m2()V"]}


def test_unmatched_methods_kept_but_not_counted(taxonomy):
    corpus = make_corpus({"A": 2})
    report = run_malloc(corpus, [taxonomy[0]], gateway(malicious("A", ["m0", "ghost"])))
    resolutions = sorted(m.resolution for m in report.findings[0].methods)
    assert resolutions == [EXACT, UNMATCHED]
    assert report.flagged_method_count == 1


def test_parse_failure_is_recorded_and_retried(taxonomy):
    corpus = make_corpus({"A": 1, "B": 1})
    backend = MockBackend([MockRule("garbage", "LA;")], BENIGN)
    report = run_malloc(corpus, [taxonomy[0]], Gateway(backend), PipelineConfig(parse_retries=1))
    assert [(f.class_name, f.stage, f.error_type) for f in report.failures] == [("LA;", "phase1", "ParseError")]
    assert report.parse_failure_count == 1
    assert backend.calls == 3  # A twice, B once


def test_phase2_failure_keeps_finding(taxonomy):
    corpus = make_corpus({"A": 1})
    rules = [
        MockRule("IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: x", "LA;", "phase1"),
        MockRule("ROLE: orphan", "LA;", "phase2"),
    ]
    report = run_malloc(corpus, [taxonomy[0]], gateway(rules))
    assert len(report.findings) == 1 and report.findings[0].methods == ()
    assert report.failures[0].stage == "phase2"


def test_fatal_gateway_errors_abort(taxonomy):
    class NoKey:
        name = "http"

        def send(self, request):
            raise AuthMissing("no key")

    with pytest.raises(AuthMissing):
        run_malloc(make_corpus({"A": 1, "B": 1}), [taxonomy[0]], Gateway(NoKey()))


def test_guards(taxonomy):
    corpus = make_corpus({"A": 1})
    with pytest.raises(EmptyBehaviorSet):
        run_malloc(corpus, [], gateway([]))
    with pytest.raises(GatewayUnconfigured):
        run_malloc(corpus, [taxonomy[0]], Gateway(None))


def test_chunked_class_is_merged(taxonomy):
    corpus = make_corpus({"A": 6})
    rules = [
        MockRule("IS_MALICIOUS: yes\nCONFIDENCE: 70\nEXPLANATION: bad m4", "LA;", "phase1", ("m4()V",)),
        MockRule("METHOD: .method public m4()V\nROLE: r\nCONFIDENCE: 70", "LA;", "phase2", ("m4()V",)),
    ]
    report = run_malloc(corpus, [taxonomy[0]], gateway(rules), PipelineConfig(token_budget=30))
    (finding,) = report.findings
    assert finding.phase1_chunks > 1
    assert finding.explanation.startswith("[chunk ")
    assert [m.resolved_signature for m in finding.methods] == [".method public m4()V"]


# -- merge_chunk_verdicts ----------------------------------------------------


def test_merge_singleton():
    v = Phase1Verdict(False, 90, "")
    assert merge_chunk_verdicts([v]) == v


def test_merge_or_and_max_over_malicious():
    got = merge_chunk_verdicts([Phase1Verdict(False, 95, "fine"), Phase1Verdict(True, 60, "bad")])
    assert (got.is_malicious, got.confidence) == (True, 60)
    assert "bad" in got.explanation and "fine" not in got.explanation


def test_merge_two_malicious():
    got = merge_chunk_verdicts([Phase1Verdict(True, 40, "first"), Phase1Verdict(True, 80, "second")])
    assert (got.is_malicious, got.confidence) == (True, 80)
    assert "first" in got.explanation and "second" in got.explanation


def test_merge_empty():
    with pytest.raises(ValueError):
        merge_chunk_verdicts([])


# -- baseline ----------------------------------------------------------------


def test_baseline_benign(taxonomy):
    assert run_baseline(make_corpus({"A": 1, "B": 1}), taxonomy, gateway([])).findings == []


def test_baseline_expands_behaviors(taxonomy):
    reply = (
        "IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: both\nBEHAVIOR: Privacy Stealing, Tricky Behavior\n"
        "METHOD: .method public m0()V\nROLE: r"
    )
    report = run_baseline(make_corpus({"A": 2, "B": 1}), taxonomy, gateway([MockRule(reply, "LA;", "baseline")]))
    assert [(f.class_name, f.behavior_id) for f in report.findings] == [("LA;", 1), ("LA;", 11)]
    assert report.findings[0].methods == report.findings[1].methods
    assert report.findings[0].methods[0].confidence == 0


def test_baseline_unparseable_class(taxonomy):
    report = run_baseline(make_corpus({"A": 1, "B": 1}), taxonomy, gateway([MockRule("???", "LB;")]))
    assert report.findings == []
    assert [(f.class_name, f.stage) for f in report.failures] == [("LB;", "baseline")]


def test_baseline_unrecognized_behavior(taxonomy):
    reply = "IS_MALICIOUS: yes\nCONFIDENCE: 80\nEXPLANATION: x\nBEHAVIOR: Crypto Theft"
    report = run_baseline(make_corpus({"A": 1}), taxonomy, gateway([MockRule(reply, "LA;")]))
    assert report.unrecognized_behaviors == [("LA;", "Crypto Theft")]
    assert report.failures[0].error_type == "NoRecognizedBehavior"


# -- report ------------------------------------------------------------------


def sample_report():
    m = MethodFinding(".method public m0()V", "role\nmore", 70, EXACT, ".method public m0()V")
    findings = [Finding("LB;", 1, "Privacy Stealing", 80, "e", (m,)), Finding("LA;", 9, "Aggressive Advertising", 60, "e")]
    return AnalysisReport("x", "malloc", "gpt-4.1", findings, 2, 10)


def test_report_sorted_and_round_trips():
    report = sample_report()
    assert [f.class_name for f in report.findings] == ["LA;", "LB;"]
    text = dumps_report(report)
    assert dumps_report(loads_report(text)) == text
    data = json.loads(text)
    assert list(data)[:4] == ["schema_version", "apk_id", "mode", "model"]
    assert data["summary"]["workload_reduction"] == 0.9


def test_bad_report_schema():
    text = dumps_report(sample_report()).replace('"schema_version": 1', '"schema_version": 99')
    with pytest.raises(Exception, match="schema_version"):
        loads_report(text)


def test_digest_layout():
    digest = render_digest(sample_report())
    assert "Class: LB;\nBehavior: Privacy Stealing (confidence 80)" in digest
    assert "  Method: .method public m0()V\n  Role Explanation: role\n    more" in digest
