"""Threshold decoders for pooled and per-branch SPS outputs, hit/miss scoring,
threshold sweeps and the small-included-angle subset."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .features import SPS_OFFSET, frame_truth

BEAM_HALF_WIDTH = 15
TOLERANCE_DEG = 5.0
DEDUP_DEG = 1.0
SWEEP_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
MAX_ANGLE = 180


def _clamp_index(i):
    return np.clip(i, SPS_OFFSET, SPS_OFFSET + MAX_ANGLE)


def decode_miso(sps, threshold: float) -> list[int]:
    """Iterative peak picking with +-15 deg suppression.

    Candidates are bins above ``threshold``.  The highest remaining candidate
    is emitted as ``index - 15`` (clamped to [0, 180]), and every bin whose
    clamped angle lies within 15 deg of the emitted one is zeroed.  Inside the
    valid range this is the plain index window; in the padding it also stops
    two clamped detections from landing on top of each other.
    """
    sps = np.array(sps, dtype=float)
    clamped = _clamp_index(np.arange(sps.size))
    cand = sps > threshold
    out = []
    while cand.any():
        i = int(np.argmax(np.where(cand, sps, -np.inf)))
        c = int(clamped[i])
        out.append(c - SPS_OFFSET)
        near = np.abs(clamped - c) <= BEAM_HALF_WIDTH
        sps[near] = 0.0
        cand &= ~near
    return sorted(out)


def decode_mimo(branch_sps, threshold: float, dedup_deg: float = DEDUP_DEG) -> list[int]:
    """One detection per branch whose maximum exceeds ``threshold``.

    Detections closer than ``dedup_deg`` to the previous kept one are merged,
    so with integer angles only coincident branches collapse.
    """
    found = []
    for sps in np.atleast_2d(np.asarray(branch_sps)):
        i = int(np.argmax(sps))
        if sps[i] > threshold:
            found.append(int(_clamp_index(i)) - SPS_OFFSET)
    out = []
    for a in sorted(found):
        if not out or abs(a - out[-1]) >= dedup_deg:
            out.append(a)
    return out


def match_and_score(predicted, truth, tolerance: float = TOLERANCE_DEG) -> tuple[int, int, int]:
    """Greedy one-to-one matching by ascending error; a pair counts if error < tolerance."""
    pairs = sorted(
        (abs(float(p) - float(t)), i, j)
        for i, p in enumerate(predicted) for j, t in enumerate(truth)
        if abs(float(p) - float(t)) < tolerance
    )
    used_p, used_t = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
    tp = len(used_p)
    return tp, len(predicted) - tp, len(truth) - tp


@dataclass
class ScoreReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    keys: dict = field(default_factory=dict)

    def add(self, tp, fp, fn):
        self.tp += tp
        self.fp += fp
        self.fn += fn
        return self

    def merge(self, other: "ScoreReport"):
        return self.add(other.tp, other.fp, other.fn)

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def row(self) -> dict:
        return {**self.keys, "TP": self.tp, "FP": self.fp, "FN": self.fn,
                "recall": round(self.recall, 6), "precision": round(self.precision, 6),
                "f1": round(self.f1, 6)}


def decode_frame(frame_sps, kind: str, threshold: float, dedup_deg: float = DEDUP_DEG):
    """``frame_sps``: ``[branches, 210]``."""
    if kind == "miso":
        return decode_miso(frame_sps[0], threshold)
    return decode_mimo(frame_sps, threshold, dedup_deg)


def score_utterance(outputs: np.ndarray, truth_frames: list, kind: str, threshold: float,
                    tolerance: float = TOLERANCE_DEG, dedup_deg: float = DEDUP_DEG,
                    include_silent: bool = False) -> ScoreReport:
    """Micro-averaged counts over frames; ``outputs`` is ``[frames, branches, 210]``."""
    rep = ScoreReport()
    for t, truth in enumerate(truth_frames[: len(outputs)]):
        if not truth and not include_silent:
            continue
        pred = decode_frame(outputs[t], kind, threshold, dedup_deg)
        rep.add(*match_and_score(pred, truth, tolerance))
    return rep


@dataclass
class UtteranceResult:
    """Model outputs for one utterance together with its grouping keys and truth."""
    uid: str
    outputs: np.ndarray
    truth: list
    n_sources: int
    sir_mode: str
    angles: list


def utterance_truth(entry: dict) -> list:
    from .dataset import entry_angles, entry_vad
    return frame_truth(entry_angles(entry), entry_vad(entry))


def oracle_outputs(entry: dict, kind: str, n_branches: int, sigma: float = 8.0) -> np.ndarray:
    """Ground-truth SPS in the model output layout, used as a perfect estimator."""
    from .dataset import entry_angles, entry_vad
    from .features import build_labels
    return build_labels(entry_angles(entry), entry_vad(entry), n_branches, kind, sigma)


def evaluate_results(results: list, kind: str, threshold: float, tolerance: float = TOLERANCE_DEG,
                     dedup_deg: float = DEDUP_DEG, extra_keys: dict | None = None) -> dict:
    """Group-wise and overall reports keyed by ``(n_sources, sir_mode)`` and ``"all"``."""
    groups: dict = {}
    total = ScoreReport(keys={**(extra_keys or {}), "model": kind, "n_sources": "all",
                              "sir_mode": "all", "threshold": threshold})
    for r in results:
        key = (r.n_sources, r.sir_mode)
        if key not in groups:
            groups[key] = ScoreReport(keys={**(extra_keys or {}), "model": kind, "n_sources": r.n_sources,
                                            "sir_mode": r.sir_mode, "threshold": threshold})
        rep = score_utterance(r.outputs, r.truth, kind, threshold, tolerance, dedup_deg)
        groups[key].merge(rep)
        total.merge(rep)
    return {**{k: v for k, v in sorted(groups.items())}, "all": total}


def threshold_sweep(results: list, kind: str, thresholds=SWEEP_THRESHOLDS, **kw) -> list[ScoreReport]:
    """Overall report at each threshold, ascending."""
    return [evaluate_results(results, kind, xi, **kw)["all"] for xi in sorted(thresholds)]


def sweep_ranges(rows: list[ScoreReport]) -> dict:
    """min / max / range of each metric across a sweep."""
    out = {}
    for m in ("recall", "precision", "f1"):
        vals = [getattr(r, m) for r in rows]
        out[m] = {"min": min(vals), "max": max(vals), "range": max(vals) - min(vals)}
    return out


def small_angle_subset(manifest: dict, max_gap: float = 15.0, split: str | None = None) -> dict:
    """Manifest copy keeping utterances with some source pair closer than ``max_gap``."""
    keep = []
    for e in manifest["entries"]:
        if split is not None and e["split"] != split:
            continue
        angles = [s["angle_deg"] for s in e["sources"]]
        if any(abs(a - b) < max_gap for a, b in combinations(angles, 2)):
            keep.append(e)
    if not keep:
        warnings.warn(f"no utterance has a source pair closer than {max_gap} deg")
    return {**manifest, "entries": keep}


# ---------------------------------------------------------------- report files

REPORT_COLUMNS = ["model", "split", "subset", "n_sources", "sir_mode", "threshold",
                  "TP", "FP", "FN", "recall", "precision", "f1"]


def write_report_csv(path, rows: list[dict], meta: dict) -> None:
    """CSV with the report columns plus ``config_hash`` and ``stage_version``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = REPORT_COLUMNS + ["config_hash", "stage_version"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**{c: "" for c in cols}, **r, **meta})


def write_report_json(path, rows: list[dict], meta: dict, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {**meta, "aggregation": "micro-averaged over frames with active ground truth",
           "matching": f"greedy by ascending error, hit if error < {TOLERANCE_DEG} deg",
           "rows": rows, **(extra or {})}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_sweep_csv(path, sweeps: dict, meta: dict) -> None:
    """Threshold table: one row per threshold, recall/precision/F1 per model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    models = list(sweeps)
    cols = ["threshold"] + [f"{m}_{k}" for k in ("recall", "precision", "f1") for m in models]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["config_hash", "stage_version"])
        n = len(next(iter(sweeps.values())))
        for i in range(n):
            xi = sweeps[models[0]][i].keys["threshold"]
            row = [xi] + [round(getattr(sweeps[m][i], k), 6) for k in ("recall", "precision", "f1") for m in models]
            w.writerow(row + [meta.get("config_hash", ""), meta.get("stage_version", "")])
