"""Training configuration and its TOML/JSON round-trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ABLATION_MODES = ("separate", "joint-uniform", "joint-curvature", "full")


@dataclass
class TrainConfig:
    seed: int = 0
    scene_seeds: list = field(default_factory=lambda: list(range(64)))
    n_objects: int = 4
    epochs: int = 8
    batch_size: int = 4
    lr: float = 5e-5
    schedule: str = "cosine"
    # loss weights
    omega_r: float = 2.0
    omega_proto: float = 1.0
    omega_sur: float = 0.05
    omega_c: float = 0.05
    omega_swav: float = 1.0
    omega_em: float = 0.1
    omega_gmm: float = 0.1
    # sampling
    mask_rate: float = 0.9
    n_lidar_rays: int = 512
    n_pixels: int = 256
    n_ray_samples: int = 32
    n_warmup: int = 4
    sampling: str = "curvature"
    curvature_mode: str = "frobenius"
    alternate_modalities: bool = False
    # prototypes
    n_k: int = 32
    d_k: int = 32
    n_sink: int = 3
    tau: float = 1.0
    sinkhorn_eps: float = 0.05
    proto_cells: str = "occupied"
    # architecture / sensors
    grid_dims: list = field(default_factory=lambda: [16, 16, 8])
    d_p: int = 32
    d_i: int = 16
    d_f: int = 32
    field_hidden: int = 64
    init_log_h: float = 1.3862943611198906
    image_size: int = 64
    n_cam: int = 2
    azimuth_steps: int = 64
    n_beams: int = 16
    mode: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        weights = [self.omega_r, self.omega_proto, self.omega_sur, self.omega_c,
                   self.omega_swav, self.omega_em, self.omega_gmm]
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule '{self.schedule}'")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in [0, 1)")
        if self.sampling not in ("uniform", "curvature"):
            raise ValueError(f"unknown sampling '{self.sampling}'")
        if self.curvature_mode not in ("frobenius", "vjp-ones"):
            raise ValueError(f"unknown curvature mode '{self.curvature_mode}'")
        if self.proto_cells not in ("occupied", "all"):
            raise ValueError(f"unknown proto_cells '{self.proto_cells}'")
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.n_k < 2 or self.epochs < 1 or self.batch_size < 1 or not self.scene_seeds:
            raise ValueError("need n_k >= 2, epochs >= 1, batch_size >= 1 and at least one scene")
        if min(self.n_lidar_rays, self.n_ray_samples) < 1 or self.n_ray_samples < 2:
            raise ValueError("need at least one LiDAR ray and two samples per ray")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text: str) -> "TrainConfig":
        return cls.from_dict(tomllib.loads(text))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {type(v)} as TOML")


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Config from an optional TOML file, flag overrides and ``CLAP_SEED``."""
    base = {}
    if path is not None:
        with open(path, "rb") as fh:
            base = tomllib.load(fh)
    base.update(overrides or {})
    if "CLAP_SEED" in os.environ:
        base["seed"] = int(os.environ["CLAP_SEED"])
    return TrainConfig.from_dict(base)


def ablation_mode(config: TrainConfig, mode: str) -> TrainConfig:
    """Configuration for one row of the component ablation.

    ``separate``: rendering only, point-only and image-only fusion inputs on
    alternating steps, uniform sampling. ``joint-uniform``: joint encoders,
    uniform sampling. ``joint-curvature``: adds curvature sampling.
    ``full``: adds prototype learning (the unmodified config).
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode '{mode}'")
    if mode == "full":
        return config.replace(mode="full")
    if mode == "joint-curvature":
        return config.replace(mode=mode, omega_proto=0.0)
    if mode == "joint-uniform":
        return config.replace(mode=mode, omega_proto=0.0, sampling="uniform")
    return config.replace(mode=mode, omega_proto=0.0, sampling="uniform", alternate_modalities=True)
