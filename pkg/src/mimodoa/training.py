"""Mini-batch training with warm-up, global-norm clipping, Adam and early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, InputError
from .features import compute_features
from .models import DoaModel, ModelConfig, save_checkpoint
from .nn import Adam, WarmupSchedule, clip_global_norm, mse_sps_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]


@dataclass
class Utterance:
    uid: str
    Y: np.ndarray        # [channels, frames, bins] band-limited spectrogram
    labels: np.ndarray   # [frames, branches, 210]
    feats: np.ndarray | None = None

    def features(self, channels: int) -> np.ndarray:
        if self.feats is None:
            self.feats = compute_features(self.Y, channels).astype(np.float32)
        return self.feats


@dataclass
class TrainSettings:
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    warmup_epochs: int = 1
    clip_norm: float = 3.0
    patience: int = 3
    seed: int = 0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)   # dicts keyed by LOG_COLUMNS
    best_epoch: int = 0
    best_val: float = float("inf")
    stopped_early: bool = False

    @property
    def train_losses(self) -> list:
        return [h["train_loss"] for h in self.history]


def batches(items: list, batch_size: int, rng: np.random.Generator | None):
    """Shuffled batches of equal-length utterances; the last short batch is kept."""
    by_len: dict = {}
    for u in items:
        by_len.setdefault(u.Y.shape[1], []).append(u)
    out = []
    for T in sorted(by_len):
        group = by_len[T]
        order = rng.permutation(len(group)) if rng is not None else np.arange(len(group))
        for s in range(0, len(group), batch_size):
            out.append([group[i] for i in order[s: s + batch_size]])
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def _stack(batch, cfg: ModelConfig):
    feats = np.stack([u.features(cfg.channels) for u in batch])
    Y = np.stack([u.Y for u in batch])
    tgt = np.stack([u.labels for u in batch])  # [B, T, N, 210]
    return feats, Y, tgt


def batch_loss(model: DoaModel, batch, backward: bool = False) -> float:
    """Mean per-utterance loss; summed over frames, bins and branches."""
    feats, Y, tgt = _stack(batch, model.cfg)
    if tgt.shape[2] != model.n_branches:
        raise InputError(f"labels have {tgt.shape[2]} branches, model has {model.n_branches}")
    outs = model.forward(feats, Y)
    B = len(batch)
    total, grads = 0.0, []
    for i, o in enumerate(outs):
        loss, g = mse_sps_loss(o, tgt[:, :, i].astype(o.dtype))
        total += loss
        grads.append(g / B)
    if backward:
        model.backward(grads)
    return total / B


def evaluate_loss(model: DoaModel, items: list, batch_size: int) -> float:
    if not items:
        return float("nan")
    tot = 0.0
    for b in batches(items, batch_size, None):
        tot += batch_loss(model, b) * len(b)
    return tot / len(items)


def _write_log(path: Path, history: list, meta: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS + list(meta))
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])]
                       + list(meta.values()))


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]), "lr": float(r["lr"])} for r in csv.DictReader(fh)]


def train(model: DoaModel, train_items: list, val_items: list, settings: TrainSettings,
          out_dir=None, config_hash: str = "", stage_version: str = "1",
          progress=None) -> TrainResult:
    """Train ``model`` in place; keeps the best-validation weights.

    With ``out_dir`` set, writes ``checkpoint.bin`` (best) and ``train_log.csv``
    after every epoch.  A non-finite loss writes ``diverged.bin`` and raises
    DivergenceError.
    """
    if not train_items:
        raise InputError("no training utterances")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": config_hash, "stage_version": stage_version}
    n_batches = len(batches(train_items, settings.batch_size, None))
    sched = WarmupSchedule(settings.lr, n_batches, settings.warmup_epochs)
    opt = Adam(lr=settings.lr)
    params = model.parameters()
    res = TrainResult()
    best = None
    bad = 0
    for epoch in range(1, settings.max_epochs + 1):
        rng = np.random.default_rng([settings.seed, epoch])
        tot, count, lr = 0.0, 0, settings.lr
        for b in batches(train_items, settings.batch_size, rng):
            model.zero_grad()
            loss = batch_loss(model, b, backward=True)
            grads = model.gradients()
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                if out is not None:
                    save_checkpoint(out / "diverged.bin", model, opt, config_hash,
                                    {"epoch": epoch, "step": opt.step_count, "loss": repr(loss)})
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {opt.step_count + 1}")
            clip_global_norm(list(grads.values()), settings.clip_norm)
            lr = sched(opt.step_count + 1)
            opt.step(params, grads, lr)
            tot += loss * len(b)
            count += len(b)
        val = evaluate_loss(model, val_items, settings.batch_size)
        row = {"epoch": epoch, "train_loss": tot / count, "val_loss": val, "lr": lr}
        res.history.append(row)
        if progress:
            progress(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_loss"], val)
        score = val if np.isfinite(val) else row["train_loss"]
        if score < res.best_val:
            res.best_val, res.best_epoch, bad = score, epoch, 0
            best = {k: v.copy() for k, v in params.items()}
            if out is not None:
                save_checkpoint(out / "checkpoint.bin", model, opt, config_hash,
                                {"epoch": epoch, "stage_version": stage_version})
        else:
            bad += 1
        if out is not None:
            _write_log(out / "train_log.csv", res.history, meta)
        if bad >= settings.patience:
            res.stopped_early = True
            break
    if best is not None:
        for k, v in best.items():
            params[k][...] = v
    return res


def monotone_after_warmup(losses: list, warmup_epochs: int = 1, n: int = 5, tol: float = 0.05) -> bool:
    """True if none of the first ``n`` post-warm-up epochs is worse than its predecessor by > ``tol``."""
    seg = losses[warmup_epochs: warmup_epochs + n]
    if len(seg) < n:
        return False
    return all(b <= a * (1 + tol) for a, b in zip(seg, seg[1:]))
