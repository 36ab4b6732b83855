"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import itertools
import random
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from markbox.barcode import compute_check_digit, validate_checked
from markbox.core import CategoryId, PipelineConfig, SetKind
from markbox.detection_io import export_detections, import_detections
from markbox.matching import levenshtein
from markbox.pipeline import Approach, Backends, ExtractionResult, evaluate, process_document, result_from_gold
from markbox.raster import BoundingBox, CheckboxDetection, CheckState, DetectionSource, RasterPage, binarize, detect_checkboxes
from markbox.synthgen import (
    DegradationSpec,
    GoldAnnotation,
    GoldCheckbox,
    default_form_spec,
    degrade,
    generate_corpus,
    oracle_ocr,
)
from markbox.vlm import MockVlm
from oracles import iso7064_mod11_10_valid, levenshtein_naive, levenshtein_recursive

pytestmark = pytest.mark.acceptance

# adjacent transpositions of unequal digits in 5-digit (payload + check) strings
# that the validation recursion rejects, out of all such transpositions;
# enumerated with the oracle and frozen
TRANSPOSITIONS_DETECTED = 35200
TRANSPOSITIONS_TOTAL = 36000


@pytest.fixture(scope="module")
def corpus200():
    return list(generate_corpus(default_form_spec(2024), 42, 200))


def _f1s(results, golds):
    report = evaluate(results, golds)
    return {kind: report.per_set[kind] for kind in SetKind}


def test_1_check_digit_exhaustive(acceptance_log):
    start = time.perf_counter()
    round_trip = substitutions = substitutions_caught = 0
    transpositions = transpositions_caught = 0
    for n in range(10_000):
        payload = f"{n:04d}"
        full = payload + str(compute_check_digit(payload))
        round_trip += validate_checked(full) and iso7064_mod11_10_valid(full)
        for pos in range(5):
            for d in "0123456789":
                if d == full[pos]:
                    continue
                substitutions += 1
                substitutions_caught += not validate_checked(full[:pos] + d + full[pos + 1 :])
        for pos in range(4):
            if full[pos] == full[pos + 1]:
                continue
            swapped = full[:pos] + full[pos + 1] + full[pos] + full[pos + 2 :]
            transpositions += 1
            caught = not validate_checked(swapped)
            assert caught == (not iso7064_mod11_10_valid(swapped))
            transpositions_caught += caught
    elapsed = time.perf_counter() - start
    ok = (
        round_trip == 10_000
        and substitutions == 450_000
        and substitutions_caught == substitutions
        and (transpositions_caught, transpositions) == (TRANSPOSITIONS_DETECTED, TRANSPOSITIONS_TOTAL)
        and elapsed < 5
    )
    acceptance_log(
        1,
        "check digit exhaustive",
        ok,
        f"round-trip {round_trip}/10000, substitutions {substitutions_caught}/{substitutions}, "
        f"transpositions {transpositions_caught}/{transpositions} = {transpositions_caught / transpositions:.4f}, {elapsed:.2f}s",
    )
    assert ok


def _random_unicode(rnd):
    pools = ["abcäöüß", "ÄÖÜxyz", "日本語", "🙂🚑", "αβγ", " -"]
    alphabet = "".join(rnd.sample(pools, 3))
    return "".join(rnd.choice(alphabet) for _ in range(rnd.randint(0, 9)))


def test_2_levenshtein_oracle_equivalence(acceptance_log):
    start = time.perf_counter()
    strings = ["".join(t) for n in range(7) for t in itertools.product("abc", repeat=n)]
    mismatches = 0
    pairs = 0
    for a in strings:
        for b in strings:
            pairs += 1
            mismatches += levenshtein(a, b) != levenshtein_recursive(a, b)
    # the unmemoized recursion on the shortest strings, as a check on the oracle itself
    for a in strings[:40]:
        for b in strings[:40]:
            assert levenshtein_naive(a, b) == levenshtein_recursive(a, b)
    rnd = random.Random(2024)
    for _ in range(1000):
        a, b = _random_unicode(rnd), _random_unicode(rnd)
        pairs += 1
        mismatches += levenshtein(a, b) != levenshtein_recursive(a, b)
    levenshtein_recursive.cache_clear()
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    acceptance_log(2, "levenshtein oracle equivalence", ok, f"{pairs} pairs, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


def _match(dets, gold_boxes):
    """Greedy one-to-one matching at IoU >= 0.5; returns {gold index: detection}."""
    candidates = []
    for gi, g in enumerate(gold_boxes):
        for di, d in enumerate(dets):
            iou = d.box.iou(g)
            if iou >= 0.5:
                candidates.append((-iou, gi, di))
    used_g, used_d, out = set(), set(), {}
    for _, gi, di in sorted(candidates):
        if gi not in used_g and di not in used_d:
            used_g.add(gi)
            used_d.add(di)
            out[gi] = dets[di]
    return out


def _fill_state_accuracy(pages, cfg):
    correct = total = 0
    for page, gold in pages:
        dets = detect_checkboxes(binarize(page, cfg.binarize_window, cfg.binarize_offset), cfg, page.dpi)
        matched = _match(dets, [g.box for g in gold.checkboxes])
        for gi, g in enumerate(gold.checkboxes):
            total += 1
            correct += gi in matched and matched[gi].state is g.state
    return correct / total


def test_3_detector_on_clean_corpus(corpus200, acceptance_log):
    cfg = PipelineConfig()
    start = time.perf_counter()
    n_dets = n_gold = n_matched = 0
    strong_marks = strong_correct = 0
    states_correct = 0
    for page, gold in corpus200:
        dets = detect_checkboxes(binarize(page, cfg.binarize_window, cfg.binarize_offset), cfg, page.dpi)
        matched = _match(dets, [g.box for g in gold.checkboxes])
        n_dets += len(dets)
        n_gold += len(gold.checkboxes)
        n_matched += len(matched)
        for gi, g in enumerate(gold.checkboxes):
            state_ok = gi in matched and matched[gi].state is g.state
            states_correct += state_ok
            if g.mark_style in ("x", "fill"):
                strong_marks += 1
                strong_correct += state_ok
    elapsed = time.perf_counter() - start
    precision, recall = n_matched / n_dets, n_matched / n_gold
    ok = precision >= 0.99 and recall >= 0.99 and strong_correct == strong_marks and elapsed < 60
    acceptance_log(
        3,
        "detector on clean corpus",
        ok,
        f"P {precision:.4f}, R {recall:.4f}, X/fill states {strong_correct}/{strong_marks}, "
        f"all states {states_correct}/{n_gold}, {elapsed:.1f}s",
    )
    assert ok


def test_4_end_to_end_clean(corpus200, acceptance_log):
    cfg = PipelineConfig()
    golds = [g for _, g in corpus200]
    ocr = [process_document(p, cfg, Backends(ocr=oracle_ocr(g, 0.0, 42)), Approach.OCR, g.document_id, 2024) for p, g in corpus200]
    vlm = [process_document(p, cfg, Backends(vlm=MockVlm(g)), Approach.VLM, g.document_id, 2024) for p, g in corpus200]
    a1, a2 = _f1s(ocr, golds), _f1s(vlm, golds)
    ok = all(m.f1 == 1.0 for m in a1.values()) and all(m.f1 == 1.0 for m in a2.values())
    acceptance_log(
        4,
        "end-to-end clean corpus",
        ok,
        "OCR eps=0 F1 "
        + "/".join(f"{a1[k].f1:.4f}" for k in SetKind)
        + ", perfect mock VLM F1 "
        + "/".join(f"{a2[k].f1:.4f}" for k in SetKind),
    )
    assert ok


def test_5_degradation_monotonicity(corpus200, acceptance_log):
    cfg = PipelineConfig()
    golds = [g for _, g in corpus200]
    f1 = {}
    for eps in (0.0, 0.1, 0.3):
        results = [
            process_document(p, cfg, Backends(ocr=oracle_ocr(g, eps, 42)), Approach.OCR, g.document_id, 2024)
            for p, g in corpus200
        ]
        f1[eps] = _f1s(results, golds)
    text_ok = all(f1[0.0][k].f1 >= f1[0.1][k].f1 >= f1[0.3][k].f1 for k in SetKind)

    # the stated level (fade 0.5, sigma 8) plus two harsher ones to show the trend
    levels = [(0.0, 0.0), (0.5, 8.0), (0.8, 12.0), (0.9, 16.0)]
    accuracy = []
    for fade, sigma in levels:
        pages = corpus200
        if fade or sigma:
            pages = [
                (degrade(p, DegradationSpec(noise_sigma=sigma, mark_fade=fade, seed=i), g.mark_boxes()), g)
                for i, (p, g) in enumerate(corpus200)
            ]
        accuracy.append(_fill_state_accuracy(pages, cfg))
    image_ok = accuracy[1] <= accuracy[0] and all(a >= b for a, b in zip(accuracy, accuracy[1:]))
    ok = text_ok and image_ok
    acceptance_log(
        5,
        "degradation monotonicity",
        ok,
        "F1 findings "
        + " >= ".join(f"{f1[e][SetKind.FINDINGS].f1:.4f}" for e in (0.0, 0.1, 0.3))
        + ", diagnoses "
        + " >= ".join(f"{f1[e][SetKind.DIAGNOSES].f1:.4f}" for e in (0.0, 0.1, 0.3))
        + "; fill-state accuracy "
        + ", ".join(f"fade {fa}/sigma {s:g}: {a:.4f}" for (fa, s), a in zip(levels, accuracy)),
    )
    assert ok


def _truncated_poisson_mean(mean, upper):
    k = np.arange(upper + 1)
    w = stats.poisson.pmf(k, mean)
    return float((k * w).sum() / w.sum())


def test_6_mock_vlm_statistics(acceptance_log):
    omission, hallucination = 0.08, 0.05
    spec = default_form_spec(2024)
    cfg = PipelineConfig()
    results, golds = [], []
    for page, gold in generate_corpus(spec, 42, 500):
        vlm = MockVlm(gold, omission, hallucination, seed=42)
        results.append(process_document(page, cfg, Backends(vlm=vlm), Approach.VLM, gold.document_id, 2024))
        golds.append(gold)
    report = evaluate(results, golds)

    details, ok = [], True
    for kind, mean in ((SetKind.FINDINGS, spec.findings_mean), (SetKind.DIAGNOSES, spec.diagnoses_mean)):
        n = len(spec.dictionary.labels(kind))
        g = _truncated_poisson_mean(mean, n)
        tp, fp = (1 - omission) * g, hallucination * (n - g)
        analytic = tp / (tp + fp)
        m = report.per_set[kind]
        kind_ok = 0.89 <= m.recall <= 0.95 and abs(m.precision - analytic) <= 0.03
        ok &= kind_ok
        details.append(f"{kind.value} R {m.recall:.4f}, P {m.precision:.4f} vs analytic {analytic:.4f}")
    acceptance_log(6, "mock VLM statistical consistency", ok, "; ".join(details))
    assert ok


def test_7_yolo_round_trip(acceptance_log):
    rnd = random.Random(7)
    width, height = 2480, 3508
    dets = []
    for _ in range(1000):
        w, h = rnd.randint(1, 400), rnd.randint(1, 400)
        box = BoundingBox(rnd.randint(0, width - w), rnd.randint(0, height - h), w, h)
        dets.append(CheckboxDetection(box, rnd.choice(list(CheckState)), 0.0, 1.0, DetectionSource.GEOMETRIC))
    page = RasterPage(np.full((height, width), 255, dtype=np.uint8))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.txt"
        path.write_text(export_detections(dets, width, height))
        back = import_detections(path, page)
    worst = max(abs(u - v) for a, b in zip(dets, back) for u, v in zip(a.box.as_list(), b.box.as_list()))
    states_ok = all(a.state is b.state for a, b in zip(dets, back))
    ok = len(back) == 1000 and worst <= 1 and states_ok
    acceptance_log(7, "YOLO round-trip", ok, f"{len(back)} detections, max coordinate error {worst} px")
    assert ok


def test_8_run_is_deterministic(tmp_path, acceptance_log):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "markbox", "run", "--seed", "42", "--pages", "20", "--out", str(out)],
            capture_output=True,
        )
        assert proc.returncode == 0, proc.stderr.decode()
        outs.append(out)
    a, b = outs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.suffix in (".json", ".jsonl", ".csv"))
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    n_results = len([f for f in files if f.parts[0] == "results"])
    ok = not differing and n_results == 20 and (a / "annual.csv").is_file()
    acceptance_log(8, "run determinism", ok, f"{len(files)} JSON/CSV files compared, {len(differing)} differ")
    assert ok


def test_9_evaluation_definitions(corpus200, acceptance_log):
    golds = [g for _, g in corpus200]
    report = evaluate([result_from_gold(g) for g in golds], golds)
    identity_ok = all(m.precision == m.recall == m.f1 == 1.0 for m in report.per_set.values()) and report.accuracy == 1.0

    box = BoundingBox(0, 0, 1, 1)
    truth = GoldAnnotation(
        "d", 2024, 10, 10, 300,
        tuple(GoldCheckbox(box, SetKind.FINDINGS, i, label, CheckState.CHECKED, box) for i, label in enumerate("AB")),
    )
    guess = ExtractionResult("d", 2024, Approach.OCR, {CategoryId(SetKind.FINDINGS, i, label) for i, label in enumerate("AC")})
    m = evaluate([guess], [truth]).per_set[SetKind.FINDINGS]
    fixture_ok = (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)
    ok = identity_ok and fixture_ok
    acceptance_log(9, "evaluation definitions", ok, f"gold vs gold all ones: {identity_ok}; {{A,B}} vs {{A,C}}: P {m.precision} R {m.recall} F1 {m.f1}")
    assert ok
