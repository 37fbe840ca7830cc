"""Mag + IPD input features, SPS label encoding and MIMO branch assignment."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import FRAME_SIZE, HOP, ComplexSpectrogram, MultichannelWaveform, frame_signal
from .errors import InputError

SPS_BINS = 210
SPS_OFFSET = 15
DEFAULT_SIGMA = 8.0
VAD_DB = -40.0


def angle_to_index(angle_deg):
    return np.asarray(angle_deg, dtype=float) + SPS_OFFSET


def index_to_angle(index):
    return np.asarray(index) - SPS_OFFSET


def encode_sps(angles_deg: Sequence[float], sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian-beam likelihood over the 210 padded angle bins.

    Each source contributes ``exp(-d**2 / sigma**2)`` with ``d`` the plain index
    distance to ``angle + 15``; overlapping sources combine by pointwise max.
    An empty set encodes to all zeros.
    """
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=float))
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if angles.size == 0:
        return np.zeros(SPS_BINS)
    if np.any((angles < 0) | (angles > 180)) or not np.all(np.isfinite(angles)):
        raise InputError(f"angles {angles} outside [0, 180]")
    idx = np.arange(SPS_BINS, dtype=float)
    d = idx[None, :] - angle_to_index(angles)[:, None]
    return np.exp(-(d ** 2) / sigma ** 2).max(axis=0)


def compute_features(spec, channels: int | None = 6) -> np.ndarray:
    """Per-frame ``[mag | cos IPD pairs | sin IPD pairs]`` vectors.

    ``spec`` is a ComplexSpectrogram or a ``[channels, frames, bins]`` array
    (possibly band-limited).  IPD pairs are channel k against channel 1,
    k = 2..C, and an undefined phase (zero bin in either channel) counts as 0.
    Returns ``[frames, (2C - 1) * bins]``.
    """
    Y = spec.values if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if Y.ndim != 3:
        raise InputError("expected [channels, frames, bins]")
    if channels is not None and Y.shape[0] != channels:
        raise InputError(f"expected {channels} channels, got {Y.shape[0]}")
    if Y.shape[0] < 2:
        raise InputError("IPD needs at least two channels")
    mag = np.abs(Y[0])
    cross = Y[1:] * np.conj(Y[0])[None]
    amp = np.abs(cross)
    defined = amp > 0
    safe = np.where(defined, amp, 1.0)
    cos = np.where(defined, cross.real / safe, 1.0)
    sin = np.where(defined, cross.imag / safe, 0.0)
    T = Y.shape[1]
    cos = cos.transpose(1, 0, 2).reshape(T, -1)
    sin = sin.transpose(1, 0, 2).reshape(T, -1)
    return np.concatenate([mag, cos, sin], axis=1)


def vad(wave, frame_size: int = FRAME_SIZE, hop: int = HOP, threshold_db: float = VAD_DB) -> np.ndarray:
    """Energy VAD on STFT-aligned frames, relative to the loudest frame."""
    x = wave.samples[0] if isinstance(wave, MultichannelWaveform) else np.asarray(wave, dtype=float)
    if x.ndim != 1:
        raise InputError("vad expects a single-source, single-channel signal")
    energy = (frame_signal(x, frame_size, hop) ** 2).sum(axis=-1)
    peak = energy.max()
    if peak <= 0:
        return np.zeros(energy.shape, dtype=bool)
    return energy >= peak * 10 ** (threshold_db / 10)


def sort_and_assign(frame_angles: Sequence[float | None], active: Sequence[bool], n_branches: int,
                    sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Branch targets ``[n_branches, 210]`` for one frame.

    Silent sources (and unused branches) take all-zero targets and sort first;
    active angles follow in ascending order.
    """
    if len(frame_angles) != len(active):
        raise InputError("one activity flag per source is required")
    angles = sorted(float(a) for a, on in zip(frame_angles, active) if on and a is not None)
    if len(angles) > n_branches:
        raise InputError(f"{len(angles)} active sources exceed {n_branches} branches")
    out = np.zeros((n_branches, SPS_BINS))
    start = n_branches - len(angles)
    for k, a in enumerate(angles):
        out[start + k] = encode_sps([a], sigma)
    return out


def frame_truth(angles: Sequence[float], vad_flags: np.ndarray) -> list[list[float]]:
    """Active ground-truth angles per frame, given ``vad_flags[source, frame]``."""
    flags = np.asarray(vad_flags, dtype=bool)
    return [sorted(float(a) for a, on in zip(angles, flags[:, t]) if on) for t in range(flags.shape[1])]


def build_labels(angles: Sequence[float], vad_flags: np.ndarray, n_branches: int, mode: str,
                 sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Frame targets: ``[frames, 1, 210]`` for MISO, ``[frames, N, 210]`` for MIMO."""
    flags = np.asarray(vad_flags, dtype=bool)
    if flags.ndim != 2 or flags.shape[0] != len(angles):
        raise InputError("vad_flags must be [sources, frames]")
    per_source = np.stack([encode_sps([a], sigma) for a in angles]) if len(angles) else np.zeros((0, SPS_BINS))
    T = flags.shape[1]
    if mode == "miso":
        out = np.zeros((T, 1, SPS_BINS))
        for t in range(T):
            on = flags[:, t]
            if on.any():
                out[t, 0] = per_source[on].max(axis=0)
        return out
    if mode != "mimo":
        raise InputError(f"unknown label mode {mode!r}")
    if len(angles) > n_branches:
        raise InputError(f"{len(angles)} sources exceed {n_branches} branches")
    order = np.argsort(np.asarray(angles, dtype=float), kind="stable")
    out = np.zeros((T, n_branches, SPS_BINS))
    for t in range(T):
        on = [s for s in order if flags[s, t]]
        start = n_branches - len(on)
        for k, s in enumerate(on):
            out[t, start + k] = per_source[s]
    return out


def write_labels(path, labels: np.ndarray) -> None:
    """Raw little-endian float32, ``[frames, branches, 210]`` row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(labels, dtype="<f4").tobytes())


def read_labels(path, n_branches: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size % (n_branches * SPS_BINS):
        raise InputError(f"{path}: size not a multiple of {n_branches} x {SPS_BINS}")
    return data.reshape(-1, n_branches, SPS_BINS)
