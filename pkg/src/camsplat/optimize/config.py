"""Training configuration, read from and written to flat TOML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_blocks: int = 30
    scene_steps_per_block: int = 50
    camera_steps_per_block: int = 20
    warmup_fraction: float = 0.2
    lr_centers: float = 2e-3
    lr_scales: float = 1e-2
    lr_rotations: float = 5e-3
    lr_opacity: float = 2.5e-2
    lr_color: float = 2e-2
    lr_camera: float = 1e-3
    lambda_ssim: float = 0.2
    sigma_min: float = 1e-4
    r_coc_px: float = 4.0
    # empty = use the dataset's background (black when it records none)
    background: tuple = ()
    seed: int = 0
    camera_enabled: bool = True
    depth_reg_enabled: bool = True
    # "modified": transmittance uses alpha * G_inv; "unmodified": plain alphas
    depth_reg_transmittance: str = "modified"
    defocus_enabled: bool = True
    camera_hidden: tuple = (32, 32)
    encoding_freqs: int = 4
    per_channel: bool = False
    n_gaussians: int = 300
    test_every: int = 5

    def __post_init__(self):
        self.background = tuple(float(b) for b in self.background)
        self.camera_hidden = tuple(int(h) for h in self.camera_hidden)
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be > 0")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ConfigError("lambda_ssim must lie in [0, 1]")
        for name in ("total_blocks", "scene_steps_per_block", "camera_steps_per_block"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.sigma_min <= 0 or self.r_coc_px < 0:
            raise ConfigError("sigma_min must be > 0 and r_coc_px >= 0")
        if self.depth_reg_transmittance not in ("modified", "unmodified"):
            raise ConfigError('depth_reg_transmittance must be "modified" or "unmodified"')
        if self.background and len(self.background) != 3:
            raise ConfigError("background must have 3 components")
        if self.test_every < 0 or self.n_gaussians <= 0:
            raise ConfigError("test_every must be >= 0 and n_gaussians > 0")

    @property
    def warmup_blocks(self) -> int:
        return int(round(self.warmup_fraction * self.total_blocks))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, val in d.items():
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                val = float(val)
            elif isinstance(default, str):
                if not isinstance(val, str):
                    raise ConfigError(f"{key} must be a string")
            elif isinstance(default, tuple) and not isinstance(val, (list, tuple)):
                raise ConfigError(f"{key} must be an array")
            kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: malformed TOML ({exc})") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["camera_hidden"] = list(self.camera_hidden)
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.to_dict(), **changes})
