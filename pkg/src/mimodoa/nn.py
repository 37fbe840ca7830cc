"""Dense, GRU and LayerNorm layers with hand-written backward passes, losses,
Adam with linear warm-up and global-norm clipping, and a finite-difference
gradient checker.

Layers cache the inputs of their last ``forward`` call; ``backward`` must
follow the matching forward.  Gradients accumulate into ``layer.grads``
until ``zero_grad``.  Sequence tensors are ``[batch, frames, features]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _finish_init(self):
        self.zero_grad()


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.params["W"] = _uniform(rng, (n_out, n_in), n_in, dtype)
        self.params["b"] = _uniform(rng, (n_out,), n_in, dtype)
        self._finish_init()

    def forward(self, x):
        if x.shape[-1] != self.params["W"].shape[1]:
            raise InputError(f"dense expects {self.params['W'].shape[1]} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x = self._x.reshape(-1, self._x.shape[-1])
        d = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] += d.T @ x
        self.grads["b"] += d.sum(axis=0)
        return dy @ self.params["W"]


class LayerNorm(Layer):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.params["g"] = np.ones(dim, dtype=dtype)
        self.params["b"] = np.zeros(dim, dtype=dtype)
        self._finish_init()

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params["g"] + self.params["b"]

    def backward(self, dy):
        xhat, inv = self._cache
        n = xhat.shape[-1]
        self.grads["g"] += (dy * xhat).reshape(-1, n).sum(axis=0)
        self.grads["b"] += dy.reshape(-1, n).sum(axis=0)
        dxhat = dy * self.params["g"]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


class GRU(Layer):
    """Single-layer unidirectional GRU, reset gate applied before the recurrent product.

    z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
    n = tanh(Wn x + Un (r * h) + bn), h' = (1 - z) * n + z * h.
    Gate blocks are stacked in (z, r, n) order in ``W``, ``U`` and ``b``.
    The state starts at zero for every sequence.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        self.params["W"] = _uniform(rng, (3 * hidden, n_in), hidden, dtype)
        self.params["U"] = _uniform(rng, (3 * hidden, hidden), hidden, dtype)
        self.params["b"] = _uniform(rng, (3 * hidden,), hidden, dtype)
        self._finish_init()

    def forward(self, x):
        B, T, _ = x.shape
        H = self.hidden
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if x.shape[-1] != W.shape[1]:
            raise InputError(f"gru expects {W.shape[1]} inputs, got {x.shape[-1]}")
        xp = x @ W.T + b
        Uzr, Un = U[: 2 * H], U[2 * H:]
        h = np.zeros((B, H), dtype=x.dtype)
        hs = np.empty((B, T + 1, H), dtype=x.dtype)
        hs[:, 0] = h
        z = np.empty((B, T, H), dtype=x.dtype)
        r = np.empty_like(z)
        n = np.empty_like(z)
        for t in range(T):
            zr = sigmoid(xp[:, t, : 2 * H] + h @ Uzr.T)
            z[:, t], r[:, t] = zr[:, :H], zr[:, H:]
            n[:, t] = np.tanh(xp[:, t, 2 * H:] + (r[:, t] * h) @ Un.T)
            h = (1 - z[:, t]) * n[:, t] + z[:, t] * h
            hs[:, t + 1] = h
        self._cache = (x, hs, z, r, n)
        return hs[:, 1:]

    def backward(self, dy):
        x, hs, z, r, n = self._cache
        B, T, H = dy.shape
        U = self.params["U"]
        Uz, Ur, Un = U[:H], U[H: 2 * H], U[2 * H:]
        dpre = np.empty((B, T, 3 * H), dtype=dy.dtype)
        dU = np.zeros_like(U)
        dh = np.zeros((B, H), dtype=dy.dtype)
        for t in range(T - 1, -1, -1):
            hp = hs[:, t]
            dh = dh + dy[:, t]
            zt, rt, nt = z[:, t], r[:, t], n[:, t]
            dan = dh * (1 - zt) * (1 - nt ** 2)
            daz = dh * (hp - nt) * zt * (1 - zt)
            drh = dan @ Un
            dar = drh * hp * rt * (1 - rt)
            dpre[:, t, :H] = daz
            dpre[:, t, H: 2 * H] = dar
            dpre[:, t, 2 * H:] = dan
            dU[:H] += daz.T @ hp
            dU[H: 2 * H] += dar.T @ hp
            dU[2 * H:] += dan.T @ (rt * hp)
            dh = dh * zt + drh * rt + daz @ Uz + dar @ Ur
        flat = dpre.reshape(-1, 3 * H)
        self.grads["W"] += flat.T @ x.reshape(-1, x.shape[-1])
        self.grads["U"] += dU
        self.grads["b"] += flat.sum(axis=0)
        return dpre @ self.params["W"]


def mse_sps_loss(estimates, targets):
    """Squared error summed over frames and bins; returns ``(loss, d loss / d estimates)``."""
    estimates = np.asarray(estimates)
    targets = np.asarray(targets)
    if estimates.shape != targets.shape:
        raise InputError(f"shape mismatch {estimates.shape} vs {targets.shape}")
    diff = estimates - targets
    return float((diff.astype(np.float64) ** 2).sum()), 2.0 * diff


def mimo_loss(estimates: list, targets: list):
    """Unweighted sum of per-branch losses; returns ``(loss, per-branch gradients)``."""
    if len(estimates) != len(targets):
        raise InputError(f"{len(estimates)} branch estimates vs {len(targets)} targets")
    total, grads = 0.0, []
    for e, t in zip(estimates, targets):
        loss, g = mse_sps_loss(e, t)
        total += loss
        grads.append(g)
    return total, grads


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((np.asarray(g, dtype=np.float64) ** 2).sum()) for g in grads)))


def clip_global_norm(grads: list, max_norm: float = 3.0):
    """Rescale ``grads`` in place when their joint L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


class WarmupSchedule:
    """Linear ramp to ``base_lr`` across the warm-up epochs, constant afterwards."""

    def __init__(self, base_lr: float, steps_per_epoch: int, warmup_epochs: int = 1):
        self.base_lr = base_lr
        self.warmup_steps = max(1, steps_per_epoch * warmup_epochs) if warmup_epochs > 0 else 0

    def __call__(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        return self.base_lr


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """In-place Adam update of every entry in ``params``."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class FDReport:
    max_rel_error: float
    errors: dict
    message: str = ""

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)`` for one tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def finite_difference_check(loss_fn: Callable[[], float], arrays: dict, analytic: dict,
                            eps: float = 1e-5) -> FDReport:
    """Central differences of ``loss_fn`` w.r.t. each array in ``arrays``.

    ``loss_fn`` must read the arrays, which are perturbed in place and restored.
    """
    errors = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise InputError("finite-difference checks need float64 arrays")
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * eps)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(analytic[name]))):
            return FDReport(float("inf"), errors, f"non-finite gradient in {name}")
        errors[name] = relative_error(analytic[name], num)
    return FDReport(max(errors.values(), default=0.0), errors)


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-5) -> FDReport:
    """Finite-difference check of a layer's parameters and input under a random projection loss."""
    proj = rng.standard_normal(layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * proj).sum())

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj)
    analytic = {f"param/{k}": v.copy() for k, v in layer.grads.items()}
    analytic["input"] = dx
    arrays = {f"param/{k}": v for k, v in layer.params.items()}
    arrays["input"] = x
    return finite_difference_check(loss, arrays, analytic, eps)
