"""Simulated multi-speaker datasets: surrogate dry sources, SIR-controlled
mixtures, and the JSON manifest that indexes them.

Manifest layout (``manifest.json``, paths relative to its directory)::

    {"format": "mimodoa-manifest", "version": 1, "config_hash": ..,
     "fs": 16000, "frame_size": 512, "hop": 256,
     "array_wall": "y=0 (longer wall), axis +x",
     "splits": {"train": 200, ...},
     "entries": [{"id", "split", "seed", "n_sources", "sir_mode", "room": {..},
                  "mic_positions": [[x, y, z] x 6], "sir_db": [..],
                  "mixture": "train/train_00000/mix.wav", "frames": 249,
                  "sources": [{"angle_deg", "range_class", "position",
                               "distance_m", "dry_id", "dry", "image",
                               "gain", "vad": "0011.."}]}]}

``vad`` is the per-frame activity string of each source; together with
``angle_deg`` it is the frame-level ground-truth angle table.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from . import room as rs
from .dsp import FRAME_SIZE, HOP, MultichannelWaveform, read_wav, write_wav
from .errors import GenerationError, InputError
from .features import vad

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "mimodoa-manifest"
MANIFEST_VERSION = 1
PEAK_LEVEL = 0.9


@dataclass
class MixtureSpec:
    room: rs.RoomSpec
    array: rs.ArrayGeometry
    sources: list  # of (SourcePlacement, dry-source id)
    sir_db: list = field(default_factory=list)
    seed: int = 0

    def validate(self, n_max: int = 4, min_sep: float = 5.0) -> None:
        if not 2 <= len(self.sources) <= n_max:
            raise InputError(f"{len(self.sources)} sources outside [2, {n_max}]")
        angles = [p.angle_deg for p, _ in self.sources]
        if any(abs(a - b) < min_sep for a, b in combinations(angles, 2)):
            raise InputError(f"angles {angles} closer than {min_sep} deg")
        if len(self.sir_db) != len(self.sources) - 1:
            raise InputError("one SIR value per interferer is required")
        if any(not -10 <= s <= 10 for s in self.sir_db):
            raise InputError("SIR outside [-10, 10] dB")


# ---------------------------------------------------------------- surrogate speech

def _burst(rng, n, fs):
    t = np.arange(n) / fs
    if rng.random() < 0.5:
        x = rng.standard_normal(n)
        lo = rng.uniform(80, 400)
        hi = rng.uniform(2500, 7000)
        x = sosfilt(butter(2, [lo, hi], "bandpass", fs=fs, output="sos"), x)
        x *= 1 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 2 * np.pi))
    else:
        f0 = rng.uniform(90, 260) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        x = np.zeros(n)
        for k in range(1, int(7000 / f0.max()) + 1):
            x += rng.uniform(0.3, 1.0) / k ** 0.7 * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        x += 0.1 * rng.standard_normal(n)
    fade = min(n // 2, int(0.01 * fs))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    x[:fade] *= ramp
    x[n - fade:] *= ramp[::-1]
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12) * 10 ** (rng.uniform(-6, 0) / 20)


def make_surrogate(rng: np.random.Generator, num_samples: int, fs: int = 16000) -> np.ndarray:
    """Bursts of band-passed noise or harmonic tone complexes separated by digital silence."""
    x = np.zeros(num_samples)
    pos = int(rng.uniform(0, 0.3) * fs)
    while pos < num_samples:
        n = min(int(rng.uniform(0.3, 1.0) * fs), num_samples - pos)
        if n > FRAME_SIZE:
            x[pos: pos + n] = _burst(rng, n, fs)
        pos += n + int(rng.uniform(0.1, 0.45) * fs)
    if not np.any(x):
        x[: fs // 2] = _burst(rng, fs // 2, fs)
    return 0.5 * x / np.abs(x).max()


# ---------------------------------------------------------------- rendering

def active_sample_mask(flags: np.ndarray, n: int, frame_size=FRAME_SIZE, hop=HOP) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for t in np.nonzero(flags)[0]:
        mask[t * hop: t * hop + frame_size] = True
    return mask


def aligned_vad(dry: np.ndarray, delay_samples: int, threshold_db: float = -40.0) -> np.ndarray:
    """VAD of the dry source shifted by its direct-path delay to channel 1."""
    shifted = np.zeros_like(dry)
    if delay_samples < dry.size:
        shifted[delay_samples:] = dry[: dry.size - delay_samples]
    return vad(shifted, threshold_db=threshold_db)


def render_mixture(spec: MixtureSpec, dry_sources, fs: int = 16000, rirs=None,
                   vad_db: float = -40.0, peak: float = PEAK_LEVEL):
    """Reverberant mixture with per-interferer SIR.

    Interferer k is scaled so that 10 log10(P_ref / P_k) = sir_db[k-1], with
    powers taken on channel 1 of the reverberant images over each source's
    active frames; source 0 is the reference.  Everything is then scaled
    jointly so the mixture and images peak at ``peak``.

    Returns ``(mixture, images[sources, mics, samples], vad_flags[sources, frames], gains)``.
    """
    dry = [np.asarray(d, dtype=float).reshape(-1) for d in dry_sources]
    if len({d.size for d in dry}) != 1:
        raise InputError("dry sources must share one length")
    if len(dry) != len(spec.sources):
        raise InputError("one dry signal per source placement is required")
    for k, d in enumerate(dry):
        if not np.any(d):
            raise InputError(f"dry source {k} is silent")
    mics = spec.array.mic_positions
    images, flags = [], []
    for k, ((place, _), d) in enumerate(zip(spec.sources, dry)):
        h = rirs[k] if rirs is not None else rs.simulate_rir(spec.room, place.position, mics, fs)
        images.append(rs.convolve_rirs(d, h))
        delay = int(round(np.linalg.norm(mics[0] - place.position) / rs.SPEED_OF_SOUND * fs))
        flags.append(aligned_vad(d, delay, vad_db))
    images = np.stack(images)
    flags = np.stack(flags)
    n = images.shape[-1]
    power = []
    for k in range(len(dry)):
        mask = active_sample_mask(flags[k], n)
        if not mask.any():
            raise InputError(f"source {k} has no active frames")
        power.append(np.mean(images[k, 0, mask] ** 2))
    gains = np.ones(len(dry))
    for k in range(1, len(dry)):
        gains[k] = np.sqrt(power[0] / (power[k] * 10 ** (spec.sir_db[k - 1] / 10)))
    images *= gains[:, None, None]
    mix = images.sum(axis=0)
    scale = peak / max(np.abs(mix).max(), np.abs(images).max())
    images *= scale
    mix = images.sum(axis=0)
    return MultichannelWaveform(mix, fs), images, flags, gains * scale


# ---------------------------------------------------------------- angles

def sample_angles(rng, n: int, min_sep: float = 5.0, small_gap: float | None = None,
                  max_tries: int = 1000) -> list:
    """Integer angles in [0, 180], pairwise >= ``min_sep`` apart.

    With ``small_gap`` set, at least one pair is closer than ``small_gap``.
    """
    for _ in range(max_tries):
        if small_gap is not None:
            a = int(rng.integers(0, 181))
            gaps = np.arange(int(np.ceil(min_sep)), int(np.ceil(small_gap)))
            b = a + int(rng.choice(gaps)) * (1 if rng.random() < 0.5 else -1)
            if not 0 <= b <= 180:
                continue
            angles = [a, b]
        else:
            angles = []
        for _ in range(200):
            if len(angles) == n:
                break
            c = int(rng.integers(0, 181))
            if all(abs(c - x) >= min_sep for x in angles):
                angles.append(c)
        if len(angles) == n:
            return angles
    raise GenerationError(f"could not place {n} angles {min_sep} deg apart after {max_tries} tries")


def min_gap(angles) -> float:
    a = sorted(angles)
    return min((b - c for c, b in zip(a, a[1:])), default=float("inf"))


# ---------------------------------------------------------------- dataset

def _utterance(split, idx, n_src, seed, cfg, root: Path):
    ss = np.random.SeedSequence([seed, split["index"], idx])
    rng = np.random.default_rng(ss)
    fs = cfg["fs"]
    n = int(round(cfg["duration_s"] * fs))
    room = rs.sample_room(rng.choice(list(rs.ROOM_CLASSES)), rng)
    array = rs.place_array(room)
    small = split.get("max_gap") if split.get("small_angle") else None
    angles = sample_angles(rng, n_src, cfg["min_separation_deg"], small)
    placements = []
    for a in angles:
        placements.append(rs.place_source(room, array, a, rng.choice(rs.RANGE_CLASSES), rng))
    sir = [0.0] * (n_src - 1) if split["sir_mode"] == "zero" else list(rng.uniform(-10, 10, n_src - 1))
    dry_ids = [f"surrogate-{seed}-{split['name']}-{idx}-{k}" for k in range(n_src)]
    spec = MixtureSpec(room, array, list(zip(placements, dry_ids)), [float(s) for s in sir], idx)
    spec.validate(n_max=max(4, n_src), min_sep=cfg["min_separation_deg"])
    dry = [make_surrogate(rng, n, fs) for _ in range(n_src)]
    mix, images, flags, gains = render_mixture(spec, dry, fs, vad_db=cfg.get("vad_db", -40.0))

    uid = f"{split['name']}_{idx:05d}"
    rel = Path(split["name"]) / uid
    write_wav(root / rel / "mix.wav", mix)
    sources = []
    for k, (p, d) in enumerate(zip(placements, dry)):
        write_wav(root / rel / f"dry{k}.wav", MultichannelWaveform(d, fs))
        if cfg.get("save_images", True):
            write_wav(root / rel / f"image{k}.wav", MultichannelWaveform(images[k], fs))
        sources.append({
            "angle_deg": int(p.angle_deg),
            "range_class": p.range_class,
            "position": [float(v) for v in p.position],
            "distance_m": float(p.distance_m),
            "dry_id": dry_ids[k],
            "dry": (rel / f"dry{k}.wav").as_posix(),
            "image": (rel / f"image{k}.wav").as_posix() if cfg.get("save_images", True) else None,
            "gain": float(gains[k]),
            "vad": "".join("1" if f else "0" for f in flags[k]),
        })
    return {
        "id": uid,
        "split": split["name"],
        "seed": [int(seed), int(split["index"]), int(idx)],
        "n_sources": n_src,
        "sir_mode": split["sir_mode"],
        "small_angle": bool(split.get("small_angle", False)),
        "room": {"length_m": room.length_m, "width_m": room.width_m, "height_m": room.height_m,
                 "rt60_s": room.rt60_s, "size_class": room.size_class,
                 "reflection": rs.calibrated_reflection(room, fs)},
        "mic_positions": [[float(v) for v in m] for m in array.mic_positions],
        "sir_db": [float(s) for s in sir],
        "mixture": (rel / "mix.wav").as_posix(),
        "frames": int(flags.shape[1]),
        "sources": sources,
    }


def generate_dataset(config: dict, seed: int, root, config_hash: str = "", progress=None) -> dict:
    """Simulate every split in ``config`` under ``root`` and write ``manifest.json``.

    ``config`` keys: ``fs``, ``duration_s``, ``min_separation_deg``, ``save_images``
    and ``splits``, a list of ``{"name", "counts": {n_sources: count}, "sir_mode":
    "zero"|"random", "small_angle": bool, "max_gap": deg}``.
    Each utterance draws from its own RNG stream keyed by (seed, split, index).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = {}
    for si, split in enumerate(config["splits"]):
        split = dict(split, index=si)
        if split["sir_mode"] not in ("zero", "random"):
            raise InputError(f"unknown SIR mode {split['sir_mode']!r}")
        idx = 0
        for n_src, count in sorted((int(k), int(v)) for k, v in split["counts"].items()):
            for _ in range(count):
                entries.append(_utterance(split, idx, n_src, seed, config, root))
                idx += 1
                if progress:
                    progress(split["name"], idx)
        counts[split["name"]] = idx
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "config_hash": config_hash,
        "fs": config["fs"],
        "frame_size": FRAME_SIZE,
        "hop": HOP,
        "array_wall": "y=0 (longer wall), axis +x; source angle from +x toward the room",
        "splits": counts,
        "entries": entries,
    }
    save_manifest(root / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    m = json.loads(Path(path).read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise InputError(f"{path}: not a {MANIFEST_FORMAT} file")
    m["_root"] = str(Path(path).parent)
    return m


def split_entries(manifest: dict, split: str) -> list:
    return [e for e in manifest["entries"] if e["split"] == split]


def entry_vad(entry: dict) -> np.ndarray:
    return np.array([[c == "1" for c in s["vad"]] for s in entry["sources"]], dtype=bool)


def entry_angles(entry: dict) -> list:
    return [s["angle_deg"] for s in entry["sources"]]


def load_mixture(manifest: dict, entry: dict) -> MultichannelWaveform:
    return read_wav(Path(manifest["_root"]) / entry["mixture"])
