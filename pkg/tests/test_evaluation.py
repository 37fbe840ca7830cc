import json
import math
from itertools import combinations, permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimodoa.evaluation import (
    ScoreReport, UtteranceResult, decode_mimo, decode_miso, evaluate_results, match_and_score,
    score_utterance, small_angle_subset, sweep_ranges, threshold_sweep, write_report_csv, write_report_json,
    write_sweep_csv,
)
from mimodoa.features import build_labels, encode_sps, frame_truth, sort_and_assign

META = {"config_hash": "h1", "stage_version": "1"}
XI_GRID = [round(0.1 * k, 1) for k in range(1, 10)]


def peaks(*pairs):
    s = np.zeros(210)
    for idx, val in pairs:
        s[idx] = val
    return s


def test_miso_close_peaks_second_suppressed():
    assert decode_miso(peaks((100, 1.0), (110, 0.9)), 0.5) == [85]


def test_miso_far_peaks_both_found():
    assert decode_miso(peaks((40, 1.0), (120, 0.9)), 0.5) == [25, 105]


def test_miso_below_threshold_and_zero():
    assert decode_miso(np.full(210, 0.4), 0.5) == []
    assert decode_miso(np.zeros(210), 0.1) == []


def test_miso_padding_clamped():
    assert decode_miso(peaks((3, 0.9)), 0.5) == [0]
    assert decode_miso(peaks((207, 0.9)), 0.5) == [180]


@pytest.mark.parametrize("theta", [0, 1, 37, 90, 150, 179, 180])
@pytest.mark.parametrize("xi", [0.1, 0.5, 0.9])
def test_miso_single_angle_round_trip(theta, xi):
    assert decode_miso(encode_sps([theta]), xi) == [theta]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(XI_GRID))
def test_miso_pairwise_separation(seed, xi):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 1, 210) ** rng.uniform(0.2, 5)
    out = decode_miso(s, xi)
    assert all(b - a > 15 for a, b in zip(out, out[1:]))
    assert all(0 <= a <= 180 for a in out)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(XI_GRID), st.sampled_from(XI_GRID))
def test_miso_output_nested_in_threshold(seed, a, b):
    lo, hi = sorted((a, b))
    s = np.random.default_rng(seed).uniform(0, 1, 210)
    assert set(decode_miso(s, hi)) <= set(decode_miso(s, lo))


def test_mimo_examples():
    b = np.stack([encode_sps([30]), encode_sps([120]), np.zeros(210)])
    assert decode_mimo(b, 0.5) == [30, 120]
    both = np.stack([encode_sps([90]), encode_sps([90])])
    assert decode_mimo(both, 0.5) == [90]
    near = np.stack([encode_sps([90]), encode_sps([91])])
    assert decode_mimo(near, 0.5) == [90, 91]
    assert decode_mimo(near, 0.5, dedup_deg=2.0) == [90]
    assert decode_mimo(np.zeros((4, 210)), 0.1) == []
    # strict threshold
    assert decode_mimo(np.full((1, 210), 0.5), 0.5) == []


def test_oracle_mimo_resolves_close_pair():
    for gap in range(1, 15):
        angles = [60, 60 + gap]
        branches = sort_and_assign(angles, [True, True], 2)
        assert match_and_score(decode_mimo(branches, 0.5), angles) == (2, 0, 0)


def test_oracle_miso_ten_degree_pair():
    angles = [60, 70]
    rep = ScoreReport().add(*match_and_score(decode_miso(encode_sps(angles), 0.5), angles))
    assert rep.recall == 0.5


def test_oracle_miso_misses_one_of_close_pair_up_to_eleven_deg():
    # from 12 deg on, the second detection at first+16 falls inside the 5 deg match window
    for a in range(0, 181):
        for gap in range(5, 12):
            if a + gap > 180:
                continue
            truth = [a, a + gap]
            for xi in XI_GRID:
                tp, _, _ = match_and_score(decode_miso(encode_sps(truth), xi), truth)
                assert tp <= 1, (truth, xi)


def assignment_oracle(pred, truth, tol):
    """Maximum number of one-to-one pairs within tolerance, by exhaustive search."""
    best = 0
    small, large = (pred, truth) if len(pred) <= len(truth) else (truth, pred)
    for perm in permutations(range(len(large)), len(small)):
        best = max(best, sum(abs(small[i] - large[j]) < tol for i, j in enumerate(perm)))
    return best


def test_match_examples():
    assert match_and_score([30, 90], [31, 150]) == (1, 1, 1)
    assert match_and_score([], [10]) == (0, 0, 1)
    assert match_and_score([10], []) == (0, 1, 0)
    assert match_and_score([10], [15]) == (0, 1, 1)  # 5 deg is not < 5
    assert match_and_score([10], [14.9]) == (1, 0, 0)
    assert match_and_score([10, 11], [10]) == (1, 1, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 180), max_size=4), st.lists(st.integers(0, 180), max_size=4))
def test_match_symmetry_and_counts(pred, truth):
    tp, fp, fn = match_and_score(pred, truth)
    assert tp + fp == len(pred) and tp + fn == len(truth)
    assert match_and_score(truth, pred) == (tp, fn, fp)
    assert tp <= assignment_oracle(pred, truth, 5.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 180), max_size=4, unique=True), st.lists(st.integers(0, 180), max_size=4))
def test_match_optimal_for_separated_predictions(pred, truth):
    # when predictions are > 10 deg apart each truth sees at most one of them, so greedy is optimal
    pred = sorted(pred)
    if any(b - a <= 10 for a, b in zip(pred, pred[1:])):
        return
    assert match_and_score(pred, truth)[0] == assignment_oracle(pred, truth, 5.0)


def test_score_report_metrics():
    r = ScoreReport().add(3, 1, 2)
    assert math.isclose(r.recall, 0.6) and math.isclose(r.precision, 0.75)
    assert math.isclose(r.f1, 2 * 0.6 * 0.75 / 1.35)
    empty = ScoreReport()
    assert empty.recall == empty.precision == empty.f1 == 0.0
    assert ScoreReport().add(1, 0, 0).merge(ScoreReport().add(0, 2, 1)).row()["TP"] == 1


def utterance(angles, T=6, kind="mimo", n=2, silent=()):
    flags = np.ones((len(angles), T), bool)
    for s, t in silent:
        flags[s, t] = False
    out = build_labels(angles, flags, 1 if kind == "miso" else n, kind)
    return UtteranceResult("u", out, frame_truth(angles, flags), len(angles), "equal", list(angles))


def test_score_utterance_micro_average_and_silence():
    u = utterance([40, 120], silent=[(0, 0), (1, 0), (0, 1)])
    rep = score_utterance(u.outputs, u.truth, "mimo", 0.5)
    # frame 0 has no truth and is skipped; 1 + 4*2 detections remain
    assert (rep.tp, rep.fp, rep.fn) == (9, 0, 0)


def test_evaluate_groups_and_total():
    a = utterance([40, 120])
    b = UtteranceResult("v", np.zeros((6, 2, 210)), a.truth, 3, "random", [40, 120])
    reps = evaluate_results([a, b], "mimo", 0.5)
    assert set(reps) == {(2, "equal"), (3, "random"), "all"}
    assert reps[(2, "equal")].recall == 1.0 and reps[(3, "random")].recall == 0.0
    assert reps["all"].tp == 12 and reps["all"].fn == 12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_non_increasing_in_threshold(seed):
    rng = np.random.default_rng(seed)
    results = []
    for k in range(3):
        angles = list(rng.choice(181, 2, replace=False))
        out = rng.uniform(0, 1, (4, 1, 210)) * 0.5 + build_labels(angles, np.ones((2, 4), bool), 1, "miso") * 0.5
        results.append(UtteranceResult(str(k), out, frame_truth(angles, np.ones((2, 4), bool)), 2, "equal", angles))
    rows = threshold_sweep(results, "miso")
    rec = [r.recall for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(rec, rec[1:]))
    rng_ = sweep_ranges(rows)
    assert rng_["recall"]["range"] == max(rec) - min(rec)


def test_small_angle_subset():
    m = {"entries": [
        {"id": "a", "split": "test", "sources": [{"angle_deg": 10}, {"angle_deg": 20}]},
        {"id": "b", "split": "test", "sources": [{"angle_deg": 10}, {"angle_deg": 90}]},
        {"id": "c", "split": "val", "sources": [{"angle_deg": 50}, {"angle_deg": 52}]},
    ]}
    assert [e["id"] for e in small_angle_subset(m)["entries"]] == ["a", "c"]
    assert [e["id"] for e in small_angle_subset(m, split="test")["entries"]] == ["a"]
    with pytest.warns(UserWarning):
        assert small_angle_subset(m, max_gap=1)["entries"] == []


def test_report_writers(tmp_path):
    reps = evaluate_results([utterance([40, 120])], "mimo", 0.5)
    write_report_csv(tmp_path / "r.csv", [r.row() for r in reps.values()], META)
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert "config_hash" in text[0] and text[1].endswith("h1,1")
    write_report_json(tmp_path / "r.json", [r.row() for r in reps.values()], META)
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["config_hash"] == "h1"
    write_sweep_csv(tmp_path / "s.csv", {"mimo": threshold_sweep([utterance([40, 120])], "mimo")}, META)
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 10
