"""MISO and MIMO DoA networks.

Both share one graph shape: a trunk (FC -> ReLU -> stacked GRU -> ReLU)
feeds 2N complex ratio filter heads (FC + LayerNorm).  Each head's filter is
applied to every channel of the mixture spectrogram, the filtered signals
are turned into frame-wise spatial covariances, and each (speech,
interference) covariance pair drives its own SPS estimator
(FC -> ReLU -> stacked GRU -> FC -> sigmoid).  MISO is the N = 1 case
trained on pooled labels.

Spectrograms enter as ``Y[batch, channels, frames, bins]`` and features as
``[batch, frames, features]``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, WavIOError
from .features import SPS_BINS
from .nn import GRU, Dense, LayerNorm, relu, relu_backward, sigmoid, sigmoid_backward

COV_FLOOR = 1e-8


@dataclass
class ModelConfig:
    n_max: int = 2
    channels: int = 6
    frame_size: int = 512
    bin_lo: int = 0
    bin_hi: int | None = None
    crf_taps: int = 3
    trunk_fc: int = 256
    trunk_gru: int = 500
    trunk_gru_layers: int = 2
    sps_fc: int = 300
    sps_gru: int = 300
    sps_gru_layers: int = 2
    sps_bins: int = SPS_BINS
    input_norm: bool = False   # LayerNorm on the trunk and estimator inputs
    trace_norm: bool = False   # per-bin trace normalisation of the covariance features
    precision: str = "float64"
    seed: int = 0

    @property
    def total_bins(self) -> int:
        return self.frame_size // 2 + 1

    @property
    def bins(self) -> int:
        hi = self.total_bins if self.bin_hi is None else self.bin_hi
        return hi - self.bin_lo

    @property
    def band(self) -> slice:
        return slice(self.bin_lo, self.bin_lo + self.bins)

    @property
    def n_features(self) -> int:
        return (2 * self.channels - 1) * self.bins

    @property
    def head_width(self) -> int:
        return 2 * self.crf_taps ** 2 * self.bins

    @property
    def n_pairs(self) -> int:
        return self.channels * (self.channels + 1) // 2

    @property
    def cov_width(self) -> int:
        return 2 * self.n_pairs * self.bins

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self) -> None:
        if self.crf_taps % 2 != 1:
            raise InputError("crf_taps must be odd")
        if not 0 <= self.bin_lo < self.bin_lo + self.bins <= self.total_bins:
            raise InputError(f"bin band [{self.bin_lo}, {self.bin_hi}) outside 0..{self.total_bins}")
        assert self.head_width == 2 * self.crf_taps ** 2 * self.bins
        if self.bins == 257 and self.crf_taps == 3:
            assert self.head_width == 4626


# ---------------------------------------------------------------- cRF / covariance

def crf_from_real(raw: np.ndarray, bins: int, taps: int) -> np.ndarray:
    """``[..., 2*K*K*bins]`` reals -> complex taps ``[..., bins, K*K]``.

    Real and imaginary parts are interleaved per tap; taps are time-major
    (tap index = (tau_t + L) * K + (tau_f + L)).
    """
    r = raw.reshape(*raw.shape[:-1], bins, taps * taps, 2)
    return r[..., 0] + 1j * r[..., 1]


def crf_grad_to_real(g: np.ndarray) -> np.ndarray:
    out = np.stack([g.real, g.imag], axis=-1)
    return out.reshape(*g.shape[:-2], -1)


def _shifted(Y: np.ndarray, taps: int):
    """Yield (tap index, Y shifted so that entry (t, f) holds Y(t + tau_t, f + tau_f))."""
    L = taps // 2
    T, F = Y.shape[-2:]
    pad = [(0, 0)] * (Y.ndim - 2) + [(L, L), (L, L)]
    Yp = np.pad(Y, pad)
    for a in range(taps):
        for b in range(taps):
            yield a * taps + b, Yp[..., a: a + T, b: b + F]


def apply_crf(Y: np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Filter every channel with the per-(t, f) complex tap grid.

    ``Y``: ``[..., channels, frames, bins]``; ``filt``: ``[..., frames, bins, K*K]``.
    Neighbours outside the spectrogram count as zero.
    """
    taps = int(round(np.sqrt(filt.shape[-1])))
    if taps * taps != filt.shape[-1]:
        raise InputError("filter tap count must be a square")
    out = np.zeros(np.broadcast_shapes(Y.shape, filt.shape[:-3] + (1,) + filt.shape[-3:-1]),
                   dtype=np.result_type(Y, filt))
    for k, Ys in _shifted(Y, taps):
        out += filt[..., None, :, :, k] * Ys
    return out


def apply_crf_backward(Y: np.ndarray, g_out: np.ndarray, taps: int) -> np.ndarray:
    """Gradient w.r.t. the filter taps (Y is not trained)."""
    parts = [None] * (taps * taps)
    for k, Ys in _shifted(Y, taps):
        parts[k] = (g_out * np.conj(Ys)).sum(axis=-3)
    return np.stack(parts, axis=-1)


def _denominator(crm: np.ndarray, window: int | None) -> np.ndarray:
    """Sum of |cRM|^2 over the chunk (``window=None``) or a causal sliding window; ``[..., T, F]``."""
    p = (crm.real ** 2 + crm.imag ** 2)
    if window is None:
        d = np.broadcast_to(p.sum(axis=-2, keepdims=True), p.shape)
    else:
        c = np.cumsum(p, axis=-2)
        d = c.copy()
        d[..., window:, :] -= c[..., :-window, :]
    return d


def frame_covariance(S: np.ndarray, crm: np.ndarray, window: int | None = None) -> np.ndarray:
    """Full ``[..., frames, bins, C, C]`` covariances ``S S^H / sum|cRM|^2``."""
    D = np.maximum(_denominator(crm, window), COV_FLOOR)
    Sv = np.moveaxis(S, -3, -1)
    phi = Sv[..., :, None] * np.conj(Sv[..., None, :]) / D[..., None, None]
    d = np.arange(Sv.shape[-1])
    phi[..., d, d] = (Sv.real ** 2 + Sv.imag ** 2) / D[..., None]  # exactly real diagonal
    il = np.tril_indices(Sv.shape[-1], -1)
    phi[..., il[0], il[1]] = np.conj(phi[..., il[1], il[0]])  # exactly Hermitian
    return phi


def flatten_covariance(phi: np.ndarray) -> np.ndarray:
    """Upper triangle incl. diagonal, real/imag interleaved, bin-major -> ``[..., frames, bins*P*2]``."""
    C = phi.shape[-1]
    iu = np.triu_indices(C)
    up = phi[..., iu[0], iu[1]]
    flat = np.stack([up.real, up.imag], axis=-1)
    return flat.reshape(*flat.shape[:-3], -1)


def unflatten_covariance(flat: np.ndarray, bins: int, channels: int) -> np.ndarray:
    iu = np.triu_indices(channels)
    P = len(iu[0])
    v = flat.reshape(*flat.shape[:-1], bins, P, 2)
    up = v[..., 0] + 1j * v[..., 1]
    phi = np.zeros(up.shape[:-1] + (channels, channels), dtype=up.dtype)
    phi[..., iu[0], iu[1]] = up
    phi[..., iu[1], iu[0]] = np.conj(up)
    return phi


class CovarianceFlat:
    """Differentiable ``(S, cRM) -> flattened upper-triangle covariance``."""

    def __init__(self, channels: int, window: int | None = None):
        self.iu = np.triu_indices(channels)
        self.channels = channels
        self.window = window

    def forward(self, S, crm):
        Draw = _denominator(crm, self.window)
        floored = Draw < COV_FLOOR
        D = np.where(floored, COV_FLOOR, Draw)
        i0, i1 = self.iu
        phi = S[..., i0, :, :] * np.conj(S[..., i1, :, :]) / D[..., None, :, :]
        phi[..., i0 == i1, :, :] = phi[..., i0 == i1, :, :].real
        self._cache = (S, crm, D, floored, phi)
        up = np.moveaxis(phi, -3, -1)
        flat = np.stack([up.real, up.imag], axis=-1)
        return flat.reshape(*flat.shape[:-3], -1)

    def backward(self, g_flat):
        S, crm, D, floored, phi = self._cache
        C = self.channels
        P = len(self.iu[0])
        T, F = S.shape[-2:]
        g = g_flat.reshape(*g_flat.shape[:-1], F, P, 2)
        g = np.moveaxis(g[..., 0] + 1j * g[..., 1], -1, -3)
        gD = -(g.real * phi.real + g.imag * phi.imag).sum(axis=-3) / D
        G = np.zeros(S.shape[:-3] + (C, C, T, F), dtype=g.dtype)
        G[..., self.iu[0], self.iu[1], :, :] = g
        Hm = G + np.conj(np.swapaxes(G, -3, -4))
        gS = np.einsum("...mntf,...ntf->...mtf", Hm, S) / D[..., None, :, :]
        gD = np.where(floored, 0.0, gD)
        if self.window is None:
            gP = np.broadcast_to(gD.sum(axis=-2, keepdims=True), gD.shape)
        else:
            w = self.window
            rc = np.cumsum(gD[..., ::-1, :], axis=-2)[..., ::-1, :]
            gP = rc.copy()
            gP[..., :-w, :] -= rc[..., w:, :]
        g_crm = 2.0 * crm * gP
        return gS, g_crm


class TraceNorm:
    """Divide each bin's flattened covariance by its trace, ``x / (tr + eps)``.

    Removes level and spectral tilt while keeping the inter-channel phase and
    relative level structure.
    """

    def __init__(self, channels: int, eps: float = 1e-8):
        i0, i1 = np.triu_indices(channels)
        self.diag = np.flatnonzero(i0 == i1) * 2   # real parts of the diagonal pairs
        self.P = len(i0)
        self.eps = eps

    def forward(self, flat):
        v = flat.reshape(*flat.shape[:-1], -1, 2 * self.P)
        n = v[..., self.diag].sum(axis=-1, keepdims=True) + self.eps
        self._cache = (v, n)
        return (v / n).reshape(flat.shape)

    def backward(self, g):
        v, n = self._cache
        gv = g.reshape(v.shape)
        dn = -(gv * v).sum(axis=-1, keepdims=True) / n ** 2
        dx = gv / n
        dx[..., self.diag] += dn
        return dx.reshape(g.shape)


# ---------------------------------------------------------------- networks

# sigmoid(-3) ~ 0.05, close to the mean label value, so early updates are not
# spent pulling every bin down from 0.5
SPS_BIAS_INIT = -3.0


class SpsEstimator:
    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.dtype
        self.norm = LayerNorm(2 * cfg.cov_width, dtype=dt) if cfg.input_norm else None
        self.fc = Dense(2 * cfg.cov_width, cfg.sps_fc, rng, dt)
        self.grus = []
        n_in = cfg.sps_fc
        for _ in range(cfg.sps_gru_layers):
            self.grus.append(GRU(n_in, cfg.sps_gru, rng, dt))
            n_in = cfg.sps_gru
        self.out = Dense(n_in, cfg.sps_bins, rng, dt)
        self.out.params["b"][:] = SPS_BIAS_INIT

    def layers(self):
        if self.norm is not None:
            yield "norm", self.norm
        yield "fc", self.fc
        for i, g in enumerate(self.grus):
            yield f"gru{i}", g
        yield "out", self.out

    def forward(self, x):
        if self.norm is not None:
            x = self.norm.forward(x)
        self._a = self.fc.forward(x)
        h = relu(self._a)
        for g in self.grus:
            h = g.forward(h)
        self._y = sigmoid(self.out.forward(h))
        return self._y

    def backward(self, dy):
        d = self.out.backward(sigmoid_backward(dy, self._y))
        for g in reversed(self.grus):
            d = g.backward(d)
        d = self.fc.backward(relu_backward(d, self._a))
        return d if self.norm is None else self.norm.backward(d)


CRF_INIT_GAIN = 0.1


class DoaModel:
    """``kind='miso'`` has one SPS output; ``kind='mimo'`` has ``cfg.n_max``."""

    def __init__(self, cfg: ModelConfig, kind: str = "mimo", cov_window: int | None = None):
        if kind not in ("miso", "mimo"):
            raise InputError(f"unknown model kind {kind!r}")
        cfg.validate()
        self.cfg = cfg
        self.kind = kind
        self.n_branches = 1 if kind == "miso" else cfg.n_max
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        self.trunk_norm = LayerNorm(cfg.n_features, dtype=dt) if cfg.input_norm else None
        self.trunk_fc = Dense(cfg.n_features, cfg.trunk_fc, rng, dt)
        self.trunk_grus = []
        n_in = cfg.trunk_fc
        for _ in range(cfg.trunk_gru_layers):
            self.trunk_grus.append(GRU(n_in, cfg.trunk_gru, rng, dt))
            n_in = cfg.trunk_gru
        self.heads = [(Dense(n_in, cfg.head_width, rng, dt), LayerNorm(cfg.head_width, dtype=dt))
                      for _ in range(2 * self.n_branches)]
        # start every filter as a pass-through (centre tap 1) plus a small learned part
        ident = np.zeros((cfg.bins, cfg.crf_taps ** 2), complex)
        ident[:, cfg.crf_taps ** 2 // 2] = 1.0
        for _, ln in self.heads:
            ln.params["g"][:] = CRF_INIT_GAIN
            ln.params["b"][:] = crf_grad_to_real(ident)
        self.branches = [SpsEstimator(cfg, rng) for _ in range(self.n_branches)]
        self.covs = [CovarianceFlat(cfg.channels, cov_window) for _ in range(2 * self.n_branches)]
        self.tnorms = [TraceNorm(cfg.channels) for _ in self.covs] if cfg.trace_norm else None
        self._check_layout()

    def _check_layout(self):
        assert self.heads[0][0].params["W"].shape[0] == 2 * self.cfg.crf_taps ** 2 * self.cfg.bins

    # parameters -------------------------------------------------------
    def named_layers(self):
        if self.trunk_norm is not None:
            yield "trunk.norm", self.trunk_norm
        yield "trunk.fc", self.trunk_fc
        for i, g in enumerate(self.trunk_grus):
            yield f"trunk.gru{i}", g
        for k, (fc, ln) in enumerate(self.heads):
            role = "speech" if k % 2 == 0 else "interference"
            yield f"head{k // 2}.{role}.fc", fc
            yield f"head{k // 2}.{role}.ln", ln
        for i, br in enumerate(self.branches):
            for name, layer in br.layers():
                yield f"branch{i}.{name}", layer

    def parameters(self) -> dict:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.named_layers() for pn in layer.params}

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # graph ------------------------------------------------------------
    def forward(self, feats: np.ndarray, Y: np.ndarray) -> list:
        """Per-branch SPS sequences ``[batch, frames, 210]``."""
        cfg = self.cfg
        if feats.ndim == 2:
            feats, Y = feats[None], Y[None]
        if feats.shape[-1] != cfg.n_features:
            raise InputError(f"model expects {cfg.n_features} features, got {feats.shape[-1]}")
        if Y.shape[-3] != cfg.channels or Y.shape[-1] != cfg.bins:
            raise InputError(f"spectrogram shape {Y.shape} does not match {cfg.channels} ch x {cfg.bins} bins")
        dt = cfg.dtype
        ct = np.result_type(dt, np.complex64)
        feats = feats.astype(dt, copy=False)
        Y = Y.astype(ct, copy=False)
        self._Y = Y
        if self.trunk_norm is not None:
            feats = self.trunk_norm.forward(feats)
        self._a0 = self.trunk_fc.forward(feats)
        h = relu(self._a0)
        for g in self.trunk_grus:
            h = g.forward(h)
        self._g = h
        z = relu(h)
        center = cfg.crf_taps ** 2 // 2
        covs = []
        for k, ((fc, ln), cov) in enumerate(zip(self.heads, self.covs)):
            raw = ln.forward(fc.forward(z))
            filt = crf_from_real(raw, cfg.bins, cfg.crf_taps)
            S = apply_crf(Y, filt)
            c = cov.forward(S, filt[..., center])
            covs.append(c if self.tnorms is None else self.tnorms[k].forward(c))
        outs = []
        for i, br in enumerate(self.branches):
            x = np.concatenate([covs[2 * i], covs[2 * i + 1]], axis=-1)
            outs.append(br.forward(x))
        return outs

    def backward(self, d_outs: list) -> None:
        cfg = self.cfg
        if len(d_outs) != self.n_branches:
            raise InputError(f"expected {self.n_branches} output gradients")
        W = cfg.cov_width
        d_covs = []
        for br, d in zip(self.branches, d_outs):
            dx = br.backward(d)
            d_covs += [dx[..., :W], dx[..., W:]]
        center = cfg.crf_taps ** 2 // 2
        dz = None
        for k, ((fc, ln), cov, dc) in enumerate(zip(self.heads, self.covs, d_covs)):
            if self.tnorms is not None:
                dc = self.tnorms[k].backward(dc)
            gS, g_crm = cov.backward(dc)
            g_filt = apply_crf_backward(self._Y, gS, cfg.crf_taps)
            g_filt[..., center] += g_crm
            d = fc.backward(ln.backward(crf_grad_to_real(g_filt).astype(cfg.dtype, copy=False)))
            dz = d if dz is None else dz + d
        d = relu_backward(dz, self._g)
        for g in reversed(self.trunk_grus):
            d = g.backward(d)
        d = self.trunk_fc.backward(relu_backward(d, self._a0))
        if self.trunk_norm is not None:
            self.trunk_norm.backward(d)

    def predict(self, Y: np.ndarray) -> np.ndarray:
        """``Y[channels, frames, bins]`` (band-limited) -> ``[frames, branches, 210]``."""
        from .features import compute_features
        feats = compute_features(Y, self.cfg.channels)
        outs = self.forward(feats[None], Y[None])
        return np.stack([o[0] for o in outs], axis=1)


def miso_forward(model: DoaModel, feats, Y):
    if model.kind != "miso":
        raise InputError("miso_forward needs a MISO model")
    return model.forward(feats, Y)[0]


def mimo_forward(model: DoaModel, feats, Y):
    if model.kind != "mimo":
        raise InputError("mimo_forward needs a MIMO model")
    return model.forward(feats, Y)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MDOACKPT"
CKPT_VERSION = 1


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, model: DoaModel, optimizer=None, config_hash: str = "", extra: dict | None = None):
    """Layout: magic, u32 version, u32 header length, JSON header, float32 LE tensor blob.

    The header lists every tensor's name, shape and element offset into the blob.
    """
    tensors = [(f"param/{k}", v) for k, v in model.parameters().items()]
    step = 0
    if optimizer is not None:
        step = optimizer.step_count
        for k in model.parameters():
            if k in optimizer.m:
                tensors += [(f"adam_m/{k}", optimizer.m[k]), (f"adam_v/{k}", optimizer.v[k])]
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "kind": model.kind,
        "model_config": asdict(model.cfg),
        "config_hash": config_hash,
        "adam_step": step,
        "tensors": entries,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, precision: str | None = None):
    """Return ``(model, header, adam_state)``; ``adam_state`` maps names to (m, v)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise WavIOError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise WavIOError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    blob = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    mc = dict(header["model_config"])
    if precision is not None:
        mc["precision"] = precision
    model = DoaModel(ModelConfig(**mc), header["kind"])
    params = model.parameters()
    adam = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"]: e["offset"] + n].reshape(e["shape"])
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name][...] = arr
        else:
            adam.setdefault(name, {})[kind] = arr.copy()
    return model, header, adam
