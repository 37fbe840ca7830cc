"""Shoebox rooms, array/source placement and image-source impulse responses.

Coordinates: x runs along the room length, y along the width, z is height.
The array sits on the y = 0 wall (one of the two longer walls), its axis
along +x, so a source angle of 0 deg points toward the x = length wall and
90 deg is broadside.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .errors import InputError, PlacementError

SPEED_OF_SOUND = 343.0
MIC_SPACINGS = (0.04, 0.04, 0.12, 0.04, 0.04)
ARRAY_WALL_OFFSET = 0.5
ARRAY_HEIGHT = 2.0
SOURCE_HEIGHT = 2.0
MARGIN = 0.5

# (length range, rt60 range) per size class; width is drawn from [3, length],
# height from [3, 3.5].
ROOM_CLASSES = {
    "small": ((4.0, 6.0), (0.2, 0.5)),
    "middle": ((6.0, 10.0), (0.3, 0.6)),
    "large": ((10.0, 15.0), (0.4, 0.7)),
}
WIDTH_MIN = 3.0
HEIGHT_RANGE = (3.0, 3.5)
RANGE_CLASSES = ("near", "medium", "far")

FD_HALF = 80  # 161-tap fractional delay
EARLY_MS = 25.0
OVERSAMPLE = 16
HIGHPASS_HZ = 50.0


@dataclass
class RoomSpec:
    length_m: float
    width_m: float
    height_m: float
    rt60_s: float
    size_class: str = "custom"

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0 or self.rt60_s <= 0:
            raise InputError("room dimensions and rt60 must be positive")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    def validate_class(self) -> None:
        """Raise if the room violates the ranges of its size class."""
        (lo, hi), (tlo, thi) = ROOM_CLASSES[self.size_class]
        ok = (lo <= self.length_m <= hi and tlo <= self.rt60_s <= thi
              and WIDTH_MIN <= self.width_m <= self.length_m
              and HEIGHT_RANGE[0] <= self.height_m <= HEIGHT_RANGE[1])
        if not ok:
            raise InputError(f"{self} outside the {self.size_class} class ranges")


@dataclass
class ArrayGeometry:
    mic_positions: np.ndarray
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    wall_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    @property
    def center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)

    @property
    def num_mics(self) -> int:
        return len(self.mic_positions)


@dataclass
class SourcePlacement:
    angle_deg: float
    range_class: str
    position: np.ndarray
    distance_m: float


def sample_room(size_class: str, rng: np.random.Generator) -> RoomSpec:
    if size_class not in ROOM_CLASSES:
        raise InputError(f"unknown room size class {size_class!r}")
    (lo, hi), (tlo, thi) = ROOM_CLASSES[size_class]
    length = rng.uniform(lo, hi)
    width = rng.uniform(WIDTH_MIN, hi)
    while width > length:
        width = rng.uniform(WIDTH_MIN, hi)
    height = rng.uniform(*HEIGHT_RANGE)
    rt60 = rng.uniform(tlo, thi)
    return RoomSpec(float(length), float(width), float(height), float(rt60), size_class)


def mic_offsets(spacings=MIC_SPACINGS) -> np.ndarray:
    """Positions along the array axis, centered on the aperture midpoint."""
    pos = np.concatenate([[0.0], np.cumsum(spacings)])
    return pos - pos[-1] / 2


def place_array(room: RoomSpec, spacings=MIC_SPACINGS) -> ArrayGeometry:
    """Center the array on the midpoint of the y = 0 wall, 0.5 m into the room."""
    offsets = mic_offsets(spacings)
    half = offsets[-1]
    if room.width_m > room.length_m:
        raise InputError("room width must not exceed its length (array goes on the longer wall)")
    if (room.length_m / 2 - half < MARGIN or room.width_m < ARRAY_WALL_OFFSET + 2 * MARGIN
            or room.height_m <= ARRAY_HEIGHT):
        raise InputError(f"room {room.dims} too small for the array offsets")
    center = np.array([room.length_m / 2, ARRAY_WALL_OFFSET, ARRAY_HEIGHT])
    mics = center + offsets[:, None] * np.array([1.0, 0.0, 0.0])
    return ArrayGeometry(mics)


def max_source_range(room: RoomSpec, array: ArrayGeometry, angle_deg: float) -> float:
    """Largest source distance along ``angle_deg``.

    The ray is cut where it leaves the box shrunk by the 0.5 m wall margin,
    and a further 0.5 m of array clearance is subtracted.
    """
    c = array.center
    th = math.radians(angle_deg)
    d = np.array([math.cos(th), math.sin(th)])
    lo = np.array([MARGIN, MARGIN])
    hi = np.array([room.length_m - MARGIN, room.width_m - MARGIN])
    t = math.inf
    for k in range(2):
        if d[k] > 1e-12:
            t = min(t, (hi[k] - c[k]) / d[k])
        elif d[k] < -1e-12:
            t = min(t, (lo[k] - c[k]) / d[k])
    return t - MARGIN


def place_source(room: RoomSpec, array: ArrayGeometry, angle_deg: float,
                 range_class: str, rng: np.random.Generator) -> SourcePlacement:
    if not 0.0 <= angle_deg <= 180.0:
        raise InputError(f"angle {angle_deg} outside [0, 180]")
    if range_class not in RANGE_CLASSES:
        raise InputError(f"unknown range class {range_class!r}")
    r_max = max_source_range(room, array, angle_deg)
    if r_max - MARGIN < MARGIN:
        raise PlacementError(f"angle {angle_deg} leaves only {r_max - MARGIN:.3f} m of range")
    edges = np.linspace(MARGIN, r_max, 4)
    k = RANGE_CLASSES.index(range_class)
    r = float(rng.uniform(edges[k], edges[k + 1]))
    th = math.radians(angle_deg)
    c = array.center
    pos = np.array([c[0] + r * math.cos(th), c[1] + r * math.sin(th), SOURCE_HEIGHT])
    return SourcePlacement(float(angle_deg), range_class, pos, r)


def source_angle(array: ArrayGeometry, position) -> float:
    v = np.asarray(position) - array.center
    return math.degrees(math.atan2(float(v @ array.wall_normal), float(v @ array.axis)))


def reflection_from_rt60(room: RoomSpec) -> float:
    """Uniform wall reflection coefficient from Eyring's formula."""
    L, W, H = room.dims
    volume = L * W * H
    surface = 2 * (L * W + L * H + W * H)
    alpha = 1.0 - math.exp(-0.161 * volume / (surface * room.rt60_s))
    return math.sqrt(1.0 - alpha)


def _decay_t60(dist, orders, beta, fs, n, c=SPEED_OF_SOUND) -> float:
    energy = beta ** (2.0 * orders) / dist ** 2
    hist = np.bincount((dist / c * fs).astype(int), energy, minlength=n)[:n]
    return schroeder_t60(np.sqrt(hist), fs)


@lru_cache(maxsize=256)
def _calibrated(dims: tuple, rt60: float, fs: int) -> float:
    room = RoomSpec(*dims, rt60)
    n = int(math.ceil(rt60 * fs))
    src = room.dims * np.array([0.31, 0.62, 0.47])
    mic = room.dims * np.array([0.58, 0.27, 0.61])
    images, orders = image_sources(room, src, image_order(room), n / fs * SPEED_OF_SOUND, mic)
    dist = np.linalg.norm(images - mic, axis=1)
    keep = dist < n / fs * SPEED_OF_SOUND
    dist, orders = dist[keep], orders[keep]
    lo, hi = 1e-3, reflection_from_rt60(room)
    if _decay_t60(dist, orders, hi, fs, n) <= rt60:
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _decay_t60(dist, orders, mid, fs, n) > rt60:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def calibrated_reflection(room: RoomSpec, fs: int = 16000) -> float:
    """Reflection coefficient whose image-source energy decay reaches rt60.

    Uniform-reflection image sources decay more slowly than Eyring's formula
    predicts (late energy is dominated by near-axial paths with few
    reflections), so the Eyring value is used as an upper bound and bisected
    down until the Schroeder fit of the image energy histogram matches.
    """
    return _calibrated(tuple(float(v) for v in room.dims), float(room.rt60_s), int(fs))


def image_order(room: RoomSpec, c: float = SPEED_OF_SOUND) -> int:
    return math.ceil(room.rt60_s * c / room.dims.min()) + 1


def fractional_delay_kernel(x: np.ndarray) -> np.ndarray:
    """Hann-windowed sinc evaluated at offsets ``x`` (samples), zero beyond +-(FD_HALF + 1)."""
    w = np.where(np.abs(x) < FD_HALF + 1, 0.5 * (1 + np.cos(np.pi * x / (FD_HALF + 1))), 0.0)
    return np.sinc(x) * w


def image_sources(room: RoomSpec, src, max_order: int, max_dist: float, center) -> tuple:
    """Image positions and reflection orders within ``max_dist`` of ``center``."""
    src = np.asarray(src, dtype=float)
    center = np.asarray(center, dtype=float)
    axes = []
    for k in range(3):
        dim = room.dims[k]
        n = np.arange(-(max_order // 2) - 1, max_order // 2 + 2)
        coords = np.concatenate([src[k] + 2 * n * dim, -src[k] + 2 * n * dim])
        orders = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        keep = (orders <= max_order) & (np.abs(coords - center[k]) <= max_dist)
        axes.append((coords[keep], orders[keep]))
    (xs, ox), (ys, oy), (zs, oz) = axes
    dyz2 = (ys[:, None] - center[1]) ** 2 + (zs[None, :] - center[2]) ** 2
    oyz = oy[:, None] + oz[None, :]
    pos, order = [], []
    for x, o in zip(xs, ox):
        keep = ((x - center[0]) ** 2 + dyz2 <= max_dist ** 2) & (o + oyz <= max_order)
        iy, iz = np.nonzero(keep)
        if iy.size:
            pos.append(np.column_stack([np.full(iy.size, x), ys[iy], zs[iz]]))
            order.append(o + oyz[iy, iz])
    if not pos:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    return np.concatenate(pos), np.concatenate(order)


def _render_impulses(delays: np.ndarray, amps: np.ndarray, n: int, exact: np.ndarray) -> np.ndarray:
    """Sum band-limited impulses into a length-``n`` response.

    Impulses flagged ``exact`` are rendered tap by tap; the rest go through an
    oversampled grid convolved with the same kernel, which is cheaper for the
    dense late tail.
    """
    rir = np.zeros(n + 2 * FD_HALF + 2)
    off = FD_HALF + 1
    taps = np.arange(-FD_HALF, FD_HALF + 1)
    if exact.any():
        d, a = delays[exact], amps[exact]
        base = np.floor(d).astype(int)
        frac = d - base
        idx = base[:, None] + taps[None, :] + off
        vals = a[:, None] * fractional_delay_kernel(taps[None, :] - frac[:, None])
        ok = (idx >= 0) & (idx < rir.size)
        np.add.at(rir, idx[ok], vals[ok])
    late = ~exact
    if late.any():
        U = OVERSAMPLE
        pos = (delays[late] + off) * U
        j = np.floor(pos).astype(int)
        w = pos - j
        grid_len = rir.size * U + 1
        grid = np.bincount(j, (1 - w) * amps[late], minlength=grid_len)[:grid_len]
        grid += np.bincount(j + 1, w * amps[late], minlength=grid_len)[:grid_len]
        ktaps = np.arange(-(FD_HALF + 1) * U, (FD_HALF + 1) * U + 1)
        kernel = fractional_delay_kernel(ktaps / U)
        conv = fftconvolve(grid, kernel)
        centre = (FD_HALF + 1) * U
        rir += conv[centre : centre + rir.size * U : U][: rir.size]
    return rir[off : off + n]


def simulate_rir(room: RoomSpec, src_position, mic_position, fs: int = 16000,
                 reflection: float | None = None, c: float = SPEED_OF_SOUND,
                 length_s: float | None = None) -> np.ndarray:
    """Image-source impulse response(s) from ``src_position`` to each microphone.

    ``mic_position`` may be a single point (returns 1-D) or ``[mics, 3]``.
    ``reflection`` overrides the rt60-calibrated coefficient (0 gives the
    anechoic direct path only).  Reverberant responses are high-passed at
    50 Hz.  The response is truncated at rt60 unless
    ``length_s`` is given; it is always long enough to hold the direct path.
    """
    mics = np.atleast_2d(np.asarray(mic_position, dtype=float))
    src = np.asarray(src_position, dtype=float)
    for p in np.vstack([mics, src[None]]):
        if np.any(p <= 0) or np.any(p >= room.dims):
            raise InputError(f"position {p} is not strictly inside the room")
    beta = calibrated_reflection(room, fs) if reflection is None else float(reflection)
    length_s = room.rt60_s if length_s is None else length_s
    direct = np.linalg.norm(mics - src, axis=1)
    n = max(int(math.ceil(length_s * fs)), int(math.ceil(direct.max() / c * fs)) + FD_HALF + 1)
    max_dist = n / fs * c
    order = 0 if beta == 0 else image_order(room, c)
    center = mics.mean(axis=0)
    radius = np.linalg.norm(mics - center, axis=1).max()
    images, orders = image_sources(room, src, order, max_dist + radius, center)
    gains = beta ** orders.astype(float)
    out = np.zeros((len(mics), n))
    for m, mic in enumerate(mics):
        dist = np.linalg.norm(images - mic, axis=1)
        keep = (dist <= max_dist) & (gains > 0)
        d, g = dist[keep], gains[keep]
        delays = d / c * fs
        amps = g / (4 * np.pi * d)
        exact = d <= direct[m] + EARLY_MS * 1e-3 * c
        out[m] = _render_impulses(delays, amps, n, exact)
    if beta > 0:
        # all image gains share one sign, so a sub-audio component builds up
        out = sosfilt(butter(2, HIGHPASS_HZ, "highpass", fs=fs, output="sos"), out, axis=-1)
    return out[0] if np.ndim(mic_position) == 1 else out


def schroeder_t60(rir: np.ndarray, fs: int = 16000, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """Reverberation time from a linear fit of the Schroeder decay between ``lo_db`` and ``hi_db``."""
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    edc = 10 * np.log10(energy / energy[0] + 1e-300)
    idx = np.nonzero((edc <= lo_db) & (edc >= hi_db))[0]
    if idx.size < 2:
        raise InputError("impulse response too short for a decay fit")
    slope, _ = np.polyfit(idx / fs, edc[idx], 1)
    return -60.0 / slope


def convolve_rirs(dry: np.ndarray, rirs: np.ndarray) -> np.ndarray:
    """Per-microphone reverberant image of a dry source, cut to the dry length."""
    return fftconvolve(dry[None, :], rirs, axes=-1)[:, : dry.shape[-1]]
