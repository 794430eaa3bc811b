"""Configuration dataclasses with lossless JSON round-tripping.

Field defaults follow the source hyperparameters wherever one exists
(loss weights, memory sizes, learning rates, adaptation schedules); sizes
that only matter for runtime (frame counts, epochs at desk scale) have a
``desk()`` preset that keeps the full suite CPU-friendly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

FRAME_RATE = 25.0  # frames per second used to convert clip seconds to frames


@dataclass
class ModelDims:
    """Shared dimensionality of the face model, features, and images."""

    h_a: int = 64            # audio feature width
    h_c: int = 85            # expression coefficient count
    h_v: int = 69            # mouth-related vertex count
    v_total: int = 100       # total vertices in the synthetic basis
    h_id: int = 10           # identity coefficient count
    image_size: int = 64     # square canvas (configurable up to 256)
    channels: int = 3
    patch_size: int = 16     # mouth patch side for the explicit memory
    exp_clamp: float = 3.0   # |alpha_exp| bound enforced by the data generator


@dataclass
class TrainConfig:
    """Audio-to-expression training knobs (also used for its adaptation)."""

    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    lambda_cof: float = 1.0
    lambda_vtx: float = 1.0
    lambda_reg: float = 0.1
    memory_size: int = 1000      # M, implicit key-value pairs
    memory_dim: int = 64         # D, key/value width
    memory_init_std: float = 0.02
    seed: int = 0
    alternate: bool = True       # alternate model/memory updates in the first half
    enc_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128           # pointwise width of the sequence blocks
    window: int = 20             # frames per training sequence
    window_stride: int = 5


@dataclass
class RenderTrainConfig:
    """Neural-renderer training knobs (also used for its adaptation)."""

    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    lambda_rec: float = 20.0
    lambda_adv: float = 1.0
    seed: int = 0
    base_channels: int = 16
    depth: int = 3
    n_explicit: int = 300        # N, explicit key-value pairs
    sim_kind: str = "neg_l2"     # retrieval by vertex closeness
    key_hidden: int = 32


@dataclass
class DataConfig:
    """Synthetic one-to-many dataset shape."""

    n_train_frames: int = 200    # per identity, across styles
    n_heldout_frames: int = 50
    styles: int = 2
    vocab_size: int = 20
    n_prototypes: int = 32       # mixture components of the expression map
    proto_temp: float = 10.0
    noise_amp: float = 0.05
    separation_floor: float = 0.25
    style_offset_scale: float = 0.4
    smoothing: int = 3
    illumination_levels: tuple = (0.7, 0.85, 1.0)
    token_seed: int = 1234       # shared token->feature maps across identities


@dataclass
class AdaptConfig:
    """New-speaker adaptation schedule."""

    a2e_lr: float = 5e-6
    a2e_epochs: int = 200
    nr_lr: float = 1e-4
    nr_epochs: int = 50
    frame_budget: int = 375      # 15 s at 25 fps


@dataclass
class RunConfig:
    """Top-level config consumed by every CLI command."""

    seed: int = 0
    identity_seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)
    data: DataConfig = field(default_factory=DataConfig)
    a2e: TrainConfig = field(default_factory=TrainConfig)
    nr: RenderTrainConfig = field(default_factory=RenderTrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        cfg = cls()
        for key, value in payload.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config field {key!r}")
            current = getattr(cfg, key)
            if dataclasses.is_dataclass(current):
                sub = type(current)()
                for sub_key, sub_value in value.items():
                    if not hasattr(sub, sub_key):
                        raise ConfigError(f"unknown config field {key}.{sub_key}")
                    if isinstance(getattr(sub, sub_key), tuple):
                        sub_value = tuple(sub_value)
                    setattr(sub, sub_key, sub_value)
                setattr(cfg, key, sub)
            else:
                setattr(cfg, key, value)
        return cfg

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    @classmethod
    def desk(cls, seed: int = 0) -> "RunConfig":
        """Small preset: minutes on a CPU instead of the full-size run."""
        cfg = cls(seed=seed)
        cfg.a2e.memory_size = 64
        cfg.a2e.memory_init_std = 0.5  # keeps the bank live against unit-norm queries
        cfg.a2e.ffn_dim = 16           # the lookup has to route through the memory
        cfg.a2e.epochs = 200
        cfg.a2e.lr = 1e-3
        cfg.a2e.seed = seed
        cfg.data.n_heldout_frames = 200
        cfg.nr.n_explicit = 24
        cfg.nr.epochs = 10
        cfg.nr.lr = 2e-4
        cfg.nr.base_channels = 8
        cfg.nr.seed = seed
        # constant lighting keeps stored patches copyable, so the renderer
        # genuinely routes appearance through the bank at this tiny scale
        cfg.data.illumination_levels = (1.0,)
        cfg.adapt.a2e_epochs = 20
        cfg.adapt.a2e_lr = 1e-4
        cfg.adapt.nr_epochs = 4
        return cfg


def frames_for_seconds(seconds: float) -> int:
    return int(round(seconds * FRAME_RATE))
