"""Run configuration: TOML profiles, environment overrides and config hashes.

Every value can be overridden through ``MIMODOA_<SECTION>__<KEY>`` environment
variables, e.g. ``MIMODOA_TRAIN__LR=3e-4`` or ``MIMODOA_MODEL__N_MAX=3``.
Values are parsed as TOML literals, falling back to plain strings.
Unset keys fall back to the dataclass defaults below, which are the
full-size network and optimiser settings.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import tomli

from .errors import InputError
from .models import ModelConfig

ENV_PREFIX = "MIMODOA_"
STAGE_VERSION = "1"


def _full_splits():
    return [
        {"name": "train", "counts": {"2": 40000, "3": 40000, "4": 40000}, "sir_mode": "zero"},
        {"name": "val", "counts": {"2": 1000, "3": 1000, "4": 1000}, "sir_mode": "zero"},
        {"name": "test", "counts": {"2": 1000, "3": 1000, "4": 1000}, "sir_mode": "zero"},
    ]


@dataclass
class DatasetSection:
    seed: int = 0
    fs: int = 16000
    duration_s: float = 4.0
    min_separation_deg: float = 5.0
    vad_db: float = -40.0
    save_images: bool = True
    splits: list = field(default_factory=_full_splits)


@dataclass
class FeatureSection:
    frame_size: int = 512
    hop: int = 256
    sigma: float = 8.0
    bin_lo: int = 0
    bin_hi: int | None = None
    channels: int = 6


@dataclass
class ModelSection:
    n_max: int = 4
    crf_taps: int = 3
    trunk_fc: int = 256
    trunk_gru: int = 500
    trunk_gru_layers: int = 2
    sps_fc: int = 300
    sps_gru: int = 300
    sps_gru_layers: int = 2
    input_norm: bool = False
    trace_norm: bool = False
    precision: str = "float32"


@dataclass
class TrainSection:
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    warmup_epochs: int = 1
    clip_norm: float = 3.0
    patience: int = 3
    train_split: str = "train"
    val_split: str = "val"


@dataclass
class EvalSection:
    splits: list = field(default_factory=lambda: ["test"])
    sweep_split: str = "test"
    threshold: float = 0.5
    thresholds: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(1, 10)])
    tolerance_deg: float = 5.0
    dedup_deg: float = 1.0
    small_angle_gap: float = 15.0
    stream_window: int | None = None


SECTIONS = {"dataset": DatasetSection, "features": FeatureSection, "model": ModelSection,
            "train": TrainSection, "eval": EvalSection}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    profile: str = "default"

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def section_hash(self, *names: str) -> str:
        """Hash of the listed sections only, so a stage's cache key ignores unrelated settings."""
        doc = {n: asdict(getattr(self, n)) for n in names}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def config_hash(self) -> str:
        return self.section_hash(*SECTIONS)

    def model_config(self) -> ModelConfig:
        f, m = self.features, self.model
        return ModelConfig(n_max=m.n_max, channels=f.channels, frame_size=f.frame_size,
                           bin_lo=f.bin_lo, bin_hi=f.bin_hi, crf_taps=m.crf_taps,
                           trunk_fc=m.trunk_fc, trunk_gru=m.trunk_gru,
                           trunk_gru_layers=m.trunk_gru_layers, sps_fc=m.sps_fc, sps_gru=m.sps_gru,
                           sps_gru_layers=m.sps_gru_layers, input_norm=m.input_norm, trace_norm=m.trace_norm, precision=m.precision,
                           seed=self.train.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.dataset.seed = seed
        out.train.seed = seed
        return out

    def validate(self) -> "RunConfig":
        if self.features.hop * 2 != self.features.frame_size:
            raise InputError("hop must be half the frame size")
        if not 0 < self.eval.threshold < 1:
            raise InputError("threshold must lie in (0, 1)")
        if self.model.n_max < 1:
            raise InputError("n_max must be >= 1")
        for s in self.dataset.splits:
            if max(int(k) for k in s["counts"]) > self.model.n_max:
                raise InputError(f"split {s['name']} has more sources than n_max={self.model.n_max}")
        self.model_config().validate()
        return self


def _build(doc: dict, profile: str) -> RunConfig:
    unknown = set(doc) - set(SECTIONS) - {"profile"}
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    for name, cls in SECTIONS.items():
        vals = doc.get(name, {})
        names = {f.name for f in fields(cls)}
        bad = set(vals) - names
        if bad:
            raise InputError(f"unknown keys in [{name}]: {sorted(bad)}")
        kw[name] = cls(**vals)
    return RunConfig(**kw, profile=doc.get("profile", profile))


def _parse_env_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    """Nested override dict from ``MIMODOA_<SECTION>__<KEY>`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for k, v in environ.items():
        if not k.startswith(ENV_PREFIX) or "__" not in k:
            continue
        section, key = k[len(ENV_PREFIX):].lower().split("__", 1)
        if section not in SECTIONS:
            continue
        out.setdefault(section, {})[key] = _parse_env_value(v)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k in SECTIONS:
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def bundled_profile(name: str) -> Path:
    path = resources.files("mimodoa") / "profiles" / f"{name}.toml"
    if not path.is_file():
        raise InputError(f"no bundled profile {name!r}")
    return Path(str(path))


def load_config(path=None, environ=None, seed: int | None = None) -> RunConfig:
    """TOML file (or a bundled profile name such as ``desk``) + env overrides + seed."""
    doc, profile = {}, "default"
    if path is not None:
        p = Path(path)
        if not p.exists() and p.suffix == "":
            p = bundled_profile(str(path))
        try:
            doc = tomli.loads(p.read_text())
        except FileNotFoundError as exc:
            raise InputError(f"config file {p} not found") from exc
        except tomli.TOMLDecodeError as exc:
            raise InputError(f"{p}: {exc}") from exc
        profile = p.stem
    doc = _merge(doc, env_overrides(environ))
    cfg = _build(doc, profile)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()
