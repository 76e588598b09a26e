"""Photometric camera: internal attenuation head, external contamination head, defocus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camsplat import autodiff as ad
from camsplat.autodiff import Tensor

SIGMOID_INIT_BIAS = 5.3    # sigmoid(5.3) ~ 0.995
SOFTPLUS_INIT_BIAS = -7.0  # softplus(-7) ~ 9.1e-4
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DefocusParams:
    focal_length: float       # m
    aperture_diameter: float  # m
    focus_distance: float     # m
    object_distance: float    # m
    pixel_pitch: float = 1.0  # m / px

    def __post_init__(self):
        if not self.focus_distance > self.focal_length > 0:
            raise ValueError("need focus_distance > focal_length > 0")
        if self.aperture_diameter <= 0 or self.object_distance <= 0 or self.pixel_pitch <= 0:
            raise ValueError("aperture, object distance and pixel pitch must be positive")


def coc_radius_m(params: DefocusParams) -> float:
    f, d = params.focal_length, params.aperture_diameter
    big_f, h = params.focus_distance, params.object_distance
    return 0.5 * f * d * abs(h - big_f) / (h * (big_f - f))


def coc_radius(params: DefocusParams) -> float:
    """Circle-of-confusion radius in pixels for a point at ``object_distance``."""
    return coc_radius_m(params) / params.pixel_pitch


@dataclass
class MLP:
    weights: list[Tensor]
    biases: list[Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.matmul(x, w) + b
            if i < len(self.weights) - 1:
                x = ad.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]


def _init_mlp(rng: np.random.Generator, sizes: list[int], out_bias: np.ndarray, name: str) -> MLP:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last:
            w = np.zeros((fan_in, fan_out))
            b = np.asarray(out_bias, dtype=float)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
        biases.append(Tensor(b, requires_grad=True, name=f"{name}.b{i}"))
    return MLP(weights, biases)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W) x 2 pixel-center coordinates normalized to [-1, 1], row-major."""
    xs = (2.0 * np.arange(width) + 1.0) / width - 1.0
    ys = (2.0 * np.arange(height) + 1.0) / height - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def positional_encoding(coords: np.ndarray, n_freqs: int) -> Tensor:
    """(x, sin(2^k pi x), cos(2^k pi x)) for k < n_freqs."""
    x = Tensor(coords)
    feats = [x]
    for k in range(n_freqs):
        scaled = x * (2.0**k * np.pi)
        feats += [ad.sin(scaled), ad.cos(scaled)]
    return ad.concat(feats, axis=1)


@dataclass
class CameraMaps:
    attenuation: Tensor  # H x W x (1 or 3), mlp_alpha
    beta: Tensor         # H x W x (1 or 3), mlp_beta
    gamma: Tensor        # H x W x 3, mlp_gamma


@dataclass
class PhotometricCamera:
    internal: MLP
    external: MLP
    encoding_freqs: int = 4
    r_coc_px: float = 4.0
    per_channel: bool = False
    _encoding_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.r_coc_px < 0:
            raise ValueError("r_coc_px must be >= 0")

    @property
    def channels(self) -> int:
        return 3 if self.per_channel else 1

    def parameters(self) -> list[Tensor]:
        return self.internal.parameters() + self.external.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def encoding(self, width: int, height: int) -> Tensor:
        key = (width, height)
        if key not in self._encoding_cache:
            with ad.no_grad():
                self._encoding_cache[key] = positional_encoding(pixel_grid(width, height),
                                                                self.encoding_freqs)
        return self._encoding_cache[key]

    def eval_maps(self, width: int, height: int) -> CameraMaps:
        enc = self.encoding(width, height)
        c = self.channels
        att = ad.sigmoid(self.internal(enc))
        ext = self.external(enc)
        beta = ad.sigmoid(ext[:, :c])
        gamma = ad.softplus(ext[:, c:])
        return CameraMaps(att.reshape(height, width, c), beta.reshape(height, width, c),
                          gamma.reshape(height, width, 3))

    def apply(self, radiance, r_coc_px: float | None = None) -> Tensor:
        """Observed image = A * DiskMean[Beta * R + Gamma]."""
        radiance = ad.as_tensor(radiance)
        h, w = radiance.shape[:2]
        maps = self.eval_maps(w, h)
        return apply_maps(maps.attenuation, maps.beta, maps.gamma, radiance,
                          self.r_coc_px if r_coc_px is None else r_coc_px)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.values.tobytes())
        return h.hexdigest()

    def copy(self) -> PhotometricCamera:
        def dup(mlp: MLP) -> MLP:
            return MLP([Tensor(t.values.copy(), True, t.name) for t in mlp.weights],
                       [Tensor(t.values.copy(), True, t.name) for t in mlp.biases])

        return PhotometricCamera(dup(self.internal), dup(self.external), self.encoding_freqs,
                                 self.r_coc_px, self.per_channel)


def apply_maps(attenuation, beta, gamma, radiance, r_coc_px: float) -> Tensor:
    emitted = beta * radiance + gamma
    return attenuation * ad.disk_conv2d(emitted, r_coc_px)


def init_identity(hidden: tuple[int, ...] = (32, 32), encoding_freqs: int = 4, seed: int = 0,
                  r_coc_px: float = 4.0, per_channel: bool = False) -> PhotometricCamera:
    """Near-identity camera: zero output weights, biases pinned so A, Beta ~ 0.995 and Gamma <= 1e-3."""
    rng = np.random.default_rng(seed)
    c = 3 if per_channel else 1
    n_in = 2 + 4 * encoding_freqs
    internal = _init_mlp(rng, [n_in, *hidden, c], np.full(c, SIGMOID_INIT_BIAS), "internal")
    ext_bias = np.concatenate([np.full(c, SIGMOID_INIT_BIAS), np.full(3, SOFTPLUS_INIT_BIAS)])
    external = _init_mlp(rng, [n_in, *hidden, c + 3], ext_bias, "external")
    return PhotometricCamera(internal, external, encoding_freqs, r_coc_px, per_channel)


def save_camera(path: str | Path, camera: PhotometricCamera) -> None:
    arrays = {}
    for head in ("internal", "external"):
        mlp = getattr(camera, head)
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            arrays[f"{head}.w{i}"] = w.values
            arrays[f"{head}.b{i}"] = b.values
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.int64(CHECKPOINT_VERSION),
                 encoding_freqs=np.int64(camera.encoding_freqs),
                 r_coc_px=np.float64(camera.r_coc_px),
                 per_channel=np.bool_(camera.per_channel), **arrays)


def load_camera(path: str | Path) -> PhotometricCamera:
    with np.load(path) as data:
        if int(data["format_version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported camera checkpoint version")
        heads = {}
        for head in ("internal", "external"):
            ws, bs, i = [], [], 0
            while f"{head}.w{i}" in data:
                ws.append(Tensor(data[f"{head}.w{i}"], True, f"{head}.w{i}"))
                bs.append(Tensor(data[f"{head}.b{i}"], True, f"{head}.b{i}"))
                i += 1
            heads[head] = MLP(ws, bs)
        return PhotometricCamera(heads["internal"], heads["external"], int(data["encoding_freqs"]),
                                 float(data["r_coc_px"]), bool(data["per_channel"]))


@dataclass
class DistortionMaps:
    attenuation: np.ndarray  # H x W x c
    beta_blurred: np.ndarray  # H x W x c, Beta after the disk mean
    gamma: np.ndarray        # H x W x 3
    effective: np.ndarray    # H x W x 3, camera response to a uniform white input


def export_distortion(camera: PhotometricCamera, width: int, height: int) -> DistortionMaps:
    with ad.no_grad():
        maps = camera.eval_maps(width, height)
        effective = camera.apply(np.ones((height, width, 3)))
        beta_blur = ad.disk_mean(maps.beta.values, camera.r_coc_px)
    return DistortionMaps(maps.attenuation.values, beta_blur, maps.gamma.values, effective.values)
