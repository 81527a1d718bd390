"""Experiment configuration: one JSON document drives a whole run."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .decoder import DecoderHyper, DecoderLossWeights, PriorHyper
from .encoder import EncoderHyper
from .simulator import BenchmarkConfig


class ConfigError(ValueError):
    pass


ARMS = ("full", "supervised_only", "no_consistency", "synthetic_only_ssl",
        "spatial_only_encoder_features", "interp_baseline")

# arm name -> symbol used in the comparison tables
ARM_SYMBOLS = {"full": "D", "supervised_only": "D_sup", "no_consistency": "D_nr",
               "synthetic_only_ssl": "D_nt", "spatial_only_encoder_features": "D_2D",
               "interp_baseline": "D_interp"}


@dataclass
class SelectionParams:
    reproducibility_top_k: int = 128
    snr_fraction: float = 0.5
    shifts: list[int] = field(default_factory=lambda: list(range(-1, 6)))
    # alignment features: this stage of the spatial proxy, pooled on a grid
    align_stage: int = 1
    align_grid: int = 4


@dataclass
class DecoderParams:
    hyper_05: DecoderHyper = field(default_factory=lambda: DecoderHyper(steps=600))
    hyper_hfr: DecoderHyper = field(default_factory=lambda: DecoderHyper(
        steps=600, batch_paired=8, batch_unpaired=8))
    weights_05: DecoderLossWeights = field(default_factory=DecoderLossWeights.rate_0p5hz)
    weights_hfr: DecoderLossWeights = field(default_factory=DecoderLossWeights.hfr)
    hfr_frames: int = 3
    train_hfr: bool = True
    use_temporal_prior: bool = False
    prior: PriorHyper = field(default_factory=PriorHyper)
    pool_stride: int = 2
    n_synthetic_images: int = 40
    synthetic_frames: int = 48


@dataclass
class Switches:
    """Ablation switches; each one is a single arm of the comparison."""
    supervised_only: bool = False
    no_consistency: bool = False
    synthetic_only_ssl: bool = False
    spatial_only_encoder_features: bool = False
    interp_baseline: bool = False

    def arm(self) -> str:
        on = [k for k, v in asdict(self).items() if v]
        if len(on) > 1:
            raise ConfigError(f"at most one ablation switch may be set, got {on}")
        return on[0] if on else "full"

    @classmethod
    def for_arm(cls, arm: str) -> "Switches":
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {ARMS}")
        return cls() if arm == "full" else cls(**{arm: True})


@dataclass
class EvalParams:
    n: int = 100
    m: int = 4
    n_perm: int = 1000
    block_len: int = 10
    alpha: float = 0.05
    # distractor clips take every 16th frame (one per TR at 8 Hz)
    distractor_spacing: int = 16


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    selection: SelectionParams = field(default_factory=SelectionParams)
    encoder: EncoderHyper = field(default_factory=EncoderHyper)
    decoder: DecoderParams = field(default_factory=DecoderParams)
    switches: Switches = field(default_factory=Switches)
    eval: EvalParams = field(default_factory=EvalParams)
    seed: int = 0
    output_dir: str = "runs/default"
    # stage cache shared between runs; default <output_dir>/cache
    cache_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.switches.arm()
        if self.selection.reproducibility_top_k > self.benchmark.n_voxels:
            raise ConfigError("reproducibility_top_k exceeds n_voxels")
        if not 0 < self.selection.snr_fraction <= 1:
            raise ConfigError("snr_fraction must be in (0, 1]")
        if self.eval.n < 2 or self.eval.m < 1 or self.eval.n_perm < 100:
            raise ConfigError("eval needs n >= 2, m >= 1 and n_perm >= 100")
        if self.decoder.hfr_frames < 3:
            raise ConfigError("HFR decoders output at least 3 frames")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_json(text)

    def save(self, path):
        Path(path).write_text(self.to_json())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def cache_root(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"


def _build(cls, d):
    """Recursively rebuild nested dataclasses from plain dicts."""
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} expects an object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    hints = _field_types(cls)
    kw = {}
    for k, v in d.items():
        t = hints.get(k)
        if dataclasses.is_dataclass(t):
            v = _build(t, v)
        elif typing.get_origin(t) is tuple and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def _field_types(cls) -> dict:
    mod = sys.modules[cls.__module__]
    return typing.get_type_hints(cls, vars(mod))


def stable_hash(obj) -> str:
    """Short content hash of a JSON-serializable value."""
    text = json.dumps(obj, sort_keys=True, default=_plain)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(o):
    if dataclasses.is_dataclass(o):
        return asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot hash {type(o).__name__}")
