"""Shared builders for the training and acceptance tests."""
import numpy as np

from mimodoa.features import build_labels
from mimodoa.models import DoaModel, ModelConfig
from mimodoa.training import TrainSettings, Utterance, train


def toy_cfg(**kw):
    base = dict(n_max=2, channels=6, frame_size=32, trunk_fc=16, trunk_gru=16, trunk_gru_layers=1,
                sps_fc=16, sps_gru=16, sps_gru_layers=1, trace_norm=True, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def toy_utterances(cfg, n=5, T=20, seed=0, kind="mimo"):
    """Random spectra with fixed, always-active two-source labels per utterance."""
    rng = np.random.default_rng(seed)
    out = []
    nb = 1 if kind == "miso" else cfg.n_max
    for i in range(n):
        Y = 0.3 * (rng.standard_normal((cfg.channels, T, cfg.bins))
                   + 1j * rng.standard_normal((cfg.channels, T, cfg.bins)))
        angles = sorted(rng.choice(np.arange(0, 181, 10), 2, replace=False).tolist())
        out.append(Utterance(f"u{i}", Y, build_labels(angles, np.ones((2, T), bool), nb, kind)))
    return out


def overfit_run(epochs=500, lr=3e-3, kind="mimo"):
    """Train the tiny model on five utterances; returns the loss curve."""
    cfg = toy_cfg()
    items = toy_utterances(cfg, kind=kind)
    model = DoaModel(cfg, kind)
    res = train(model, items, [], TrainSettings(lr=lr, batch_size=5, max_epochs=epochs, patience=epochs + 1))
    return res.train_losses
