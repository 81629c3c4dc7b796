import json
import random
from fractions import Fraction

import pytest

from smaliloc.evaluation import (
    ApkMismatch,
    BadGroundTruth,
    DanglingVerdict,
    GroundTruth,
    UnknownBehaviorId,
    format_percent,
    format_table,
    loads_ground_truth,
    metrics_row,
    metrics_to_dict,
    score,
    score_from_verdicts,
    workload_reduction,
)
from smaliloc.pipeline import AnalysisReport, Finding
from smaliloc.responses import EXACT, UNMATCHED, MethodFinding
from smaliloc.review import VerdictRecord


def brute_force(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # exact rational arithmetic, independent of the float formula
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = Fraction(2) / (1 / p + 1 / r) if p and r else Fraction(0)
    return float(p), float(r), float(f)


def random_triples(n: int, seed: int = 11):
    rng = random.Random(seed)
    triples = [(0, 0, 0), (0, 5, 0), (0, 0, 5), (3, 0, 0)]
    while len(triples) < n:
        triples.append(tuple(rng.choice([0, rng.randint(0, 5), rng.randint(0, 500)]) for _ in range(3)))
    return triples


def test_metric_formula_examples():
    row = metrics_row("class", 3, 1, 0)
    assert (row.precision, row.recall) == (0.75, 1.0)
    assert row.f1 == pytest.approx(0.857, abs=1e-3)
    zero = metrics_row("class", 0, 0, 4)
    assert (zero.precision, zero.recall, zero.f1) == (0.0, 0.0, 0.0)


def test_metric_formula_against_brute_force():
    for tp, fp, fn in random_triples(200):
        row = metrics_row("method", tp, fp, fn)
        p, r, f = brute_force(tp, fp, fn)
        assert row.precision == p and row.recall == r
        assert row.f1 == f


@pytest.mark.parametrize("flagged, total, expected", [(22, 165, 1 - 22 / 165), (0, 165, 1.0), (165, 165, 0.0), (0, 0, 0.0)])
def test_workload_reduction(flagged, total, expected):
    assert workload_reduction(flagged, total) == expected


def test_workload_reduction_rendering():
    assert abs(workload_reduction(22, 165) - 0.8667) < 1e-4
    assert format_percent(workload_reduction(22, 165)) == "87%"


@pytest.mark.parametrize("flagged, total", [(-1, 5), (1, -5), (6, 5)])
def test_workload_reduction_guards(flagged, total):
    with pytest.raises(ValueError):
        workload_reduction(flagged, total)


# -- scoring -----------------------------------------------------------------


def finding(cls, bid, methods=()):
    ms = tuple(
        MethodFinding(sig, "r", 50, EXACT if not sig.startswith("?") else UNMATCHED, None if sig.startswith("?") else sig)
        for sig in methods
    )
    return Finding(cls, bid, f"b{bid}", 80, "e", ms)


def report(*findings, apk="x", total=20):
    return AnalysisReport(apk, "malloc", "m", list(findings), 5, total)


def truth(classes, methods=(), apk="x"):
    return GroundTruth(
        apk,
        {c: frozenset(ids) for c, ids in classes.items()},
        {(c, s): frozenset(ids) for c, s, ids in methods},
    )


def test_five_class_scenario():
    pred = report(finding("A", 1), finding("B", 1), finding("C", 9))
    gt = truth({"A": [1], "B": [1], "C": [11]})
    c, _ = score(pred, gt)
    assert (c.tp, c.fp, c.fn) == (2, 1, 1)
    assert c.precision == pytest.approx(0.667, abs=1e-3) and c.recall == pytest.approx(0.667, abs=1e-3)
    comp, _ = score(pred, gt, count_unit="component")
    assert (comp.tp, comp.fp, comp.fn) == (3, 0, 0)


def test_empty_report():
    c, m = score(report(), truth({"A": [1]}, [("A", "m", [1])]))
    assert (c.precision, c.recall, c.f1, m.precision, m.recall, m.f1) == (0, 0, 0, 0, 0, 0)


def test_method_level_and_unmatched():
    pred = report(finding("A", 1, ["s1", "s2", "?ghost"]))
    gt = truth({"A": [1]}, [("A", "s1", [1]), ("A", "s3", [1])])
    _, m = score(pred, gt)
    assert (m.tp, m.fp, m.fn) == (1, 2, 1)


def test_apk_mismatch():
    with pytest.raises(ApkMismatch):
        score(report(apk="a"), truth({}, apk="b"))


def test_invariants_random():
    rng = random.Random(3)
    classes = [f"C{i}" for i in range(6)]
    for _ in range(50):
        gt = truth({c: rng.sample(range(1, 13), rng.randint(1, 2)) for c in rng.sample(classes, 3)})
        pairs = [(c, b) for c in classes for b in range(1, 13)]
        preds = rng.sample(pairs, rng.randint(0, 8))
        c, _ = score(report(*(finding(cl, b) for cl, b in preds)), gt)
        assert c.tp + c.fn == len(gt.class_pairs())
        shuffled = preds[:]
        rng.shuffle(shuffled)
        assert score(report(*(finding(cl, b) for cl, b in shuffled)), gt)[0] == c
        missing = sorted(gt.class_pairs() - set(preds))
        if missing:
            better, _ = score(report(*(finding(cl, b) for cl, b in preds + [missing[0]])), gt)
            assert better.recall >= c.recall
        wrong = next(p for p in pairs if p not in gt.class_pairs() and p not in preds)
        worse, _ = score(report(*(finding(cl, b) for cl, b in preds + [wrong])), gt)
        assert worse.precision <= c.precision


# -- ground truth ------------------------------------------------------------


def test_ground_truth_file():
    text = json.dumps(
        {
            "apk_id": "x",
            "classes": {"A": [1, 11]},
            "methods": [{"class_name": "A", "signature_line": " .method a()V ", "behaviors": [1]}],
        }
    )
    gt = loads_ground_truth(text)
    assert gt.method_pairs() == {(("A", ".method a()V"), 1)}


def test_unknown_behavior_id():
    with pytest.raises(UnknownBehaviorId):
        loads_ground_truth(json.dumps({"apk_id": "x", "classes": {"A": [13]}}))


def test_method_label_needs_class_label():
    with pytest.raises(BadGroundTruth):
        loads_ground_truth(
            json.dumps({"apk_id": "x", "classes": {"A": [1]}, "methods": [{"class_name": "A", "signature_line": "s", "behaviors": [2]}]})
        )


@pytest.mark.parametrize("text", ["not json", "{}", '{"apk_id": "x", "classes": []}'])
def test_malformed_ground_truth(text):
    with pytest.raises(BadGroundTruth):
        loads_ground_truth(text)


# -- verdicts ----------------------------------------------------------------


def test_verdict_precision_all_accepted():
    findings = [finding(f"C{i}", 1, [f"s{i}{j}" for j in range(3 if i < 5 else 2)]) for i in range(6)]
    rep = report(*findings)
    assert sum(len(f.methods) for f in rep.findings) == 17
    verdicts = [VerdictRecord(f.class_name, 1, None, "accepted") for f in findings]
    verdicts += [VerdictRecord(f.class_name, 1, m.resolved_signature, "accepted") for f in findings for m in f.methods]
    c, m = score_from_verdicts(rep, verdicts)
    assert (c.tp, c.precision, m.tp, m.precision) == (6, 1.0, 17, 1.0)
    assert c.recall is None and c.f1 is None


def test_verdict_precision_mixed():
    rep = report(*(finding(f"C{i}", 1) for i in range(5)))
    decisions = ["accepted", "accepted", "accepted", "rejected", "unsure"]
    c, _ = score_from_verdicts(rep, [VerdictRecord(f"C{i}", 1, None, d) for i, d in enumerate(decisions)])
    assert c.precision == 0.75


def test_dangling_verdict():
    with pytest.raises(DanglingVerdict):
        score_from_verdicts(report(finding("A", 1)), [VerdictRecord("Z", 1, None, "accepted")])


def test_table_and_dict():
    c, m = metrics_row("class", 5, 1, 0), metrics_row("method", 3, 0, 1)
    table = format_table([("two-phase", "gpt-4.1", c, m)])
    assert table.splitlines()[0].split() == ["Method", "Model", "C-Prec", "C-Rec", "C-F1", "M-Prec", "M-Rec", "M-F1"]
    assert table.splitlines()[1].split()[2:] == ["0.83", "1.00", "0.91", "1.00", "0.75", "0.86"]
    assert metrics_to_dict(c, m)["class"]["tp"] == 5
