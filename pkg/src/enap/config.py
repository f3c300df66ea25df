"""Pipeline configuration: one flat record, an INI file form, and per-stage seeding."""

from __future__ import annotations

import configparser
import hashlib
import io
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

SECTION = "pipeline"
ENCODER_ALIASES = {"exact": "exact-history", "exact-history": "exact-history", "random-rnn": "random-rnn",
                   "trained-rnn": "trained-rnn"}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # symbol abstraction
    feature_encoder: str = "identity"  # identity | standardize
    min_cluster_size: int = 0  # 0: max(5, 1% of steps)
    min_samples: int = 0  # 0: same as min_cluster_size
    cluster_selection: str = "eom"  # eom | leaf
    refine_kmeans: bool = True
    # history encoder
    encoder: str = "trained-rnn"
    rnn_hidden: int = 64
    symbol_embed: int = 16
    exact_dim: int = 256
    rnn_epochs: int = 60
    rnn_lr: float = 3e-3
    rnn_batch: int = 32
    lambda_contrast: float = 0.5
    normalize_output: bool = True
    # mining
    tau_sim: float = 0.9
    eps_err: float = 0.1
    max_eq_rounds: int = 50
    prune: bool = True
    eq_on_holdout: bool = False
    holdout_fraction: float = 0.2
    # control and residual learning
    eps_tiebreak: float = 0.5
    fallback: str = "nearest-state"  # nearest-state | hold
    lambda_reg: float = 0.01
    state_embed_dim: int = 16
    residual_hidden: str = "64,64"
    residual_lr: float = 1e-3
    residual_epochs: int = 200
    residual_batch: int = 256
    residual_tol: float = 1e-6
    em_iters: int = 1

    def __post_init__(self):
        if not 0.0 < self.tau_sim <= 1.0:
            raise ValueError(f"tau_sim must lie in (0, 1], got {self.tau_sim}")
        if self.eps_err <= 0:
            raise ValueError("eps_err must be positive")
        if not 0.0 < self.eps_tiebreak < 1.0:
            raise ValueError("eps_tiebreak must lie in (0, 1)")
        if self.lambda_contrast < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.em_iters < 1:
            raise ValueError("em_iters must be at least 1")
        if self.fallback not in ("nearest-state", "hold"):
            raise ValueError(f"unknown fallback {self.fallback!r}")
        if self.cluster_selection not in ("eom", "leaf"):
            raise ValueError(f"unknown cluster selection {self.cluster_selection!r}")
        if self.feature_encoder not in ("identity", "standardize"):
            raise ValueError(f"unknown feature encoder {self.feature_encoder!r}")
        if self.encoder not in ENCODER_ALIASES:
            raise ValueError(f"unknown history encoder {self.encoder!r}")
        object.__setattr__(self, "encoder", ENCODER_ALIASES[self.encoder])

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.residual_hidden.split(",") if v.strip())

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- text form -------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp[SECTION] = {k: _fmt(v) for k, v in asdict(self).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if SECTION not in cp:
            raise ValueError(f"config has no [{SECTION}] section")
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in cp[SECTION].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse(raw, getattr(cls, key))
        return cls(**values)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_ini())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for one pipeline stage derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(stage.encode())])


def stage_seed(seed: int, stage: str) -> int:
    return int(stage_rng(seed, stage).integers(2**31))


def frozenlake_config(**kw) -> PipelineConfig:
    return PipelineConfig(encoder="exact-history", **kw)


def multiphase2d_config(**kw) -> PipelineConfig:
    # velocity commands vary by up to ~0.5 within a phase, so the EQ tolerance is wider
    return PipelineConfig(eps_err=0.5, **kw)
