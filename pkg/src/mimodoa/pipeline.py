"""Run-directory stages: simulate, features, train, infer, evaluate, sweep, report.

Layout under the stage directory::

    data/manifest.json, data/<split>/<uid>/*.wav
    features/index.json, features/<uid>.npy      band-limited complex64 STFT
    labels/<kind>/<uid>.f32                       [frames, branches, 210]
    models/<kind>/checkpoint.bin, train_log.csv
    infer/<kind>/index.json, infer/<kind>/<uid>.f32
    eval/<kind>.csv, eval/<kind>.json
    sweep/sweep.csv, sweep/<kind>.csv
    report/report.md, report/report.csv, report/*.png

Binary caches cannot carry metadata, so each cache directory has an
``index.json`` recording the config hash and stage version.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .config import STAGE_VERSION, RunConfig
from .dataset import entry_angles, entry_vad, generate_dataset, load_manifest, load_mixture, split_entries
from .dsp import stft
from .errors import InputError, MissingArtifactError
from .evaluation import (
    UtteranceResult, evaluate_results, small_angle_subset, sweep_ranges, threshold_sweep,
    utterance_truth, write_report_csv, write_report_json, write_sweep_csv,
)
from .features import SPS_BINS, build_labels, read_labels, write_labels
from .models import DoaModel, load_checkpoint
from .training import TrainSettings, Utterance, read_log, train

log = logging.getLogger(__name__)

KINDS = ("miso", "mimo")


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self):
        return self.root / "data" / "manifest.json"

    @property
    def features(self):
        return self.root / "features"

    def labels(self, kind):
        return self.root / "labels" / kind

    def model(self, kind):
        return self.root / "models" / kind

    def infer(self, kind):
        return self.root / "infer" / kind

    @property
    def eval(self):
        return self.root / "eval"

    @property
    def sweep(self):
        return self.root / "sweep"

    @property
    def report(self):
        return self.root / "report"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _meta(cfg: RunConfig, *sections) -> dict:
    return {"config_hash": cfg.section_hash(*sections) if sections else cfg.config_hash,
            "stage_version": STAGE_VERSION}


def _write_index(path: Path, meta: dict, items: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**meta, "items": items}, indent=1, sort_keys=True) + "\n")


def _check_kind(kind):
    if kind not in KINDS:
        raise InputError(f"model kind must be one of {KINDS}")


# ---------------------------------------------------------------- stages

def run_simulate(cfg: RunConfig, run: RunDir, progress=None) -> dict:
    ds = cfg.dataset
    conf = {"fs": ds.fs, "duration_s": ds.duration_s, "min_separation_deg": ds.min_separation_deg,
            "save_images": ds.save_images, "vad_db": ds.vad_db, "splits": ds.splits}
    return generate_dataset(conf, ds.seed, run.manifest.parent,
                            config_hash=cfg.section_hash("dataset"), progress=progress)


def n_branches(cfg: RunConfig, kind: str) -> int:
    return 1 if kind == "miso" else cfg.model.n_max


def run_features(cfg: RunConfig, run: RunDir) -> int:
    """Band-limited spectrogram cache plus MISO and MIMO label files for every utterance."""
    man = load_manifest(_require(run.manifest, "simulate"))
    mc = cfg.model_config()
    band = mc.band
    run.features.mkdir(parents=True, exist_ok=True)
    ids = []
    for e in man["entries"]:
        spec = stft(load_mixture(man, e), cfg.features.frame_size, cfg.features.hop)
        if spec.values.shape[0] != mc.channels:
            raise InputError(f"{e['id']}: {spec.values.shape[0]} channels, config expects {mc.channels}")
        Y = np.ascontiguousarray(spec.values[:, :, band].astype(np.complex64))
        np.save(run.features / f"{e['id']}.npy", Y, allow_pickle=False)
        flags = entry_vad(e)[:, : Y.shape[1]]
        for kind in KINDS:
            lab = build_labels(entry_angles(e), flags, n_branches(cfg, kind), kind, cfg.features.sigma)
            write_labels(run.labels(kind) / f"{e['id']}.f32", lab)
        ids.append(e["id"])
    meta = _meta(cfg, "dataset", "features")
    _write_index(run.features / "index.json", {**meta, "bins": [band.start, band.stop]}, ids)
    for kind in KINDS:
        _write_index(run.labels(kind) / "index.json",
                     {**meta, "branches": n_branches(cfg, kind), "sigma": cfg.features.sigma}, ids)
    return len(ids)


def load_utterances(cfg: RunConfig, run: RunDir, kind: str, entries: list, labels: bool = True) -> list:
    _require(run.features / "index.json", "features")
    out = []
    for e in entries:
        Y = np.load(_require(run.features / f"{e['id']}.npy", "features"))
        lab = None
        if labels:
            lab = read_labels(_require(run.labels(kind) / f"{e['id']}.f32", "features"), n_branches(cfg, kind))
        out.append(Utterance(e["id"], Y, lab))
    return out


def build_model(cfg: RunConfig, kind: str) -> DoaModel:
    return DoaModel(cfg.model_config(), kind)


def run_train(cfg: RunConfig, run: RunDir, kind: str, progress=None):
    _check_kind(kind)
    man = load_manifest(_require(run.manifest, "simulate"))
    tr = load_utterances(cfg, run, kind, split_entries(man, cfg.train.train_split))
    va = load_utterances(cfg, run, kind, split_entries(man, cfg.train.val_split))
    t = cfg.train
    settings = TrainSettings(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs,
                             warmup_epochs=t.warmup_epochs, clip_norm=t.clip_norm,
                             patience=t.patience, seed=t.seed)
    model = build_model(cfg, kind)
    meta = _meta(cfg, "dataset", "features", "model", "train")
    res = train(model, tr, va, settings, run.model(kind), meta["config_hash"], STAGE_VERSION, progress)
    return model, res


def load_trained(cfg: RunConfig, run: RunDir, kind: str) -> DoaModel:
    path = _require(run.model(kind) / "checkpoint.bin", f"train --model {kind}")
    model, _, _ = load_checkpoint(path)
    for c in model.covs:
        c.window = cfg.eval.stream_window
    return model


def eval_entries(cfg: RunConfig, man: dict) -> list:
    names = list(dict.fromkeys(list(cfg.eval.splits) + [cfg.eval.sweep_split]))
    return [e for e in man["entries"] if e["split"] in names]


def run_infer(cfg: RunConfig, run: RunDir, kind: str) -> int:
    """SPS outputs ``[frames, branches, 210]`` for every evaluation utterance."""
    _check_kind(kind)
    man = load_manifest(_require(run.manifest, "simulate"))
    model = load_trained(cfg, run, kind)
    entries = eval_entries(cfg, man)
    utts = load_utterances(cfg, run, kind, entries, labels=False)
    d = run.infer(kind)
    d.mkdir(parents=True, exist_ok=True)
    for u in utts:
        write_labels(d / f"{u.uid}.f32", model.predict(u.Y))
    _write_index(d / "index.json", _meta(cfg), [u.uid for u in utts])
    return len(utts)


def load_results(cfg: RunConfig, run: RunDir, kind: str, entries: list) -> list:
    d = run.infer(kind)
    _require(d / "index.json", f"infer --model {kind}")
    out = []
    for e in entries:
        outs = read_labels(_require(d / f"{e['id']}.f32", f"infer --model {kind}"), n_branches(cfg, kind))
        out.append(UtteranceResult(e["id"], outs, utterance_truth(e), e["n_sources"], e["sir_mode"],
                                   entry_angles(e)))
    return out


def _score_rows(cfg, kind, results_by_split, threshold, subset_ids=None):
    rows = []
    ev = cfg.eval
    kw = {"tolerance": ev.tolerance_deg, "dedup_deg": ev.dedup_deg}
    for split, results in results_by_split.items():
        reps = evaluate_results(results, kind, threshold, extra_keys={"split": split, "subset": "all"}, **kw)
        rows += [r.row() for r in reps.values()]
    if subset_ids is not None:
        pooled = [r for res in results_by_split.values() for r in res if r.uid in subset_ids]
        if pooled:
            reps = evaluate_results(pooled, kind, threshold,
                                    extra_keys={"split": "+".join(results_by_split), "subset": "small_angle"}, **kw)
            rows += [r.row() for r in reps.values()]
    return rows


def run_evaluate(cfg: RunConfig, run: RunDir, kind: str, threshold: float | None = None) -> list:
    _check_kind(kind)
    man = load_manifest(_require(run.manifest, "simulate"))
    xi = cfg.eval.threshold if threshold is None else threshold
    by_split = {s: load_results(cfg, run, kind, split_entries(man, s)) for s in cfg.eval.splits}
    small = small_angle_subset({**man, "entries": [e for e in man["entries"] if e["split"] in cfg.eval.splits]},
                               cfg.eval.small_angle_gap)
    rows = _score_rows(cfg, kind, by_split, xi, {e["id"] for e in small["entries"]})
    meta = _meta(cfg)
    write_report_csv(run.eval / f"{kind}.csv", rows, meta)
    write_report_json(run.eval / f"{kind}.json", rows, meta)
    return rows


def run_sweep(cfg: RunConfig, run: RunDir, kinds=KINDS) -> dict:
    man = load_manifest(_require(run.manifest, "simulate"))
    entries = split_entries(man, cfg.eval.sweep_split)
    sweeps, ranges = {}, {}
    for kind in kinds:
        res = load_results(cfg, run, kind, entries)
        sweeps[kind] = threshold_sweep(res, kind, cfg.eval.thresholds, tolerance=cfg.eval.tolerance_deg,
                                       dedup_deg=cfg.eval.dedup_deg)
        ranges[kind] = sweep_ranges(sweeps[kind])
        meta = _meta(cfg)
        write_report_csv(run.sweep / f"{kind}.csv",
                         [{**r.row(), "split": cfg.eval.sweep_split, "subset": "all"} for r in sweeps[kind]], meta)
    write_sweep_csv(run.sweep / "sweep.csv", sweeps, _meta(cfg))
    (run.sweep / "ranges.json").write_text(json.dumps({**_meta(cfg), "ranges": ranges}, indent=1,
                                                      sort_keys=True) + "\n")
    return {"sweeps": sweeps, "ranges": ranges}


def run_report(cfg: RunConfig, run: RunDir, threshold: float | None = None) -> Path:
    """Markdown + CSV comparison of both models, plus figures."""
    from .plotting import plot_loss_curves, plot_sps_example, plot_sweep_box, plot_sweep_curves

    xi = cfg.eval.threshold if threshold is None else threshold
    rows = []
    for kind in KINDS:
        rows += run_evaluate(cfg, run, kind, xi)
    sw = run_sweep(cfg, run)
    out = run.report
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg)
    write_report_csv(out / "report.csv", rows, meta)
    write_sweep_csv(out / "thresholds.csv", sw["sweeps"], meta)
    figs = [plot_sweep_box(sw["sweeps"], out / "threshold_box.png"),
            plot_sweep_curves(sw["sweeps"], out / "threshold_curves.png")]
    logs = {k: read_log(run.model(k) / "train_log.csv") for k in KINDS
            if (run.model(k) / "train_log.csv").exists()}
    if logs:
        figs.append(plot_loss_curves(logs, out / "loss_curves.png"))
    man = load_manifest(run.manifest)
    ex = split_entries(man, cfg.eval.sweep_split)
    if ex:
        e = ex[0]
        outs = {k: read_labels(run.infer(k) / f"{e['id']}.f32", n_branches(cfg, k)) for k in KINDS}
        figs.append(plot_sps_example(e, outs, out / "sps_example.png"))
    (out / "report.md").write_text(_markdown(cfg, rows, sw, xi, figs))
    return out / "report.md"


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _markdown(cfg, rows, sw, xi, figs) -> str:
    lines = ["# DoA evaluation report", "",
             f"config hash `{cfg.config_hash}`, stage version {STAGE_VERSION}, profile `{cfg.profile}`", "",
             "Counts are micro-averaged over frames with active ground truth; a detection is a hit "
             f"when its error is below {cfg.eval.tolerance_deg} deg.", "",
             f"## Results at threshold {xi}", "",
             "| model | split | subset | sources | SIR | TP | FP | FN | recall | precision | F1 |",
             "|---|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[k]) for k in ("model", "split", "subset", "n_sources", "sir_mode",
                                                              "TP", "FP", "FN", "recall", "precision", "f1")) + " |")
    kinds = list(sw["sweeps"])
    lines += ["", f"## Threshold sweep ({cfg.eval.sweep_split})", "",
              "| threshold | " + " | ".join(f"{k} {m}" for m in ("R", "P", "F1") for k in kinds) + " |",
              "|---" * (1 + 3 * len(kinds)) + "|"]
    for i, rep in enumerate(sw["sweeps"][kinds[0]]):
        vals = [getattr(sw["sweeps"][k][i], m) for m in ("recall", "precision", "f1") for k in kinds]
        lines.append(f"| {rep.keys['threshold']} | " + " | ".join(f"{v:.4f}" for v in vals) + " |")
    lines += ["", "| model | metric | min | max | range |", "|---|---|---|---|---|"]
    for k in kinds:
        for m, st in sw["ranges"][k].items():
            lines.append(f"| {k} | {m} | {st['min']:.4f} | {st['max']:.4f} | {st['range']:.4f} |")
    lines += ["", "## Figures", ""] + [f"![{Path(f).stem}]({Path(f).name})" for f in figs]
    return "\n".join(lines) + "\n"
