"""Synthetic datasets with known photometric distortion.

Clean views are splat renders of a ground-truth Gaussian cloud; the
distorted views push them through vignetting, lens contamination and the
same disk blur the camera model uses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from camsplat import autodiff as ad
from camsplat.imageio import MAX16, ImageDecodeError, quantize, read_png16, write_png16
from camsplat.scene import CameraView, GaussianCloud, render

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DATASET_FORMAT = "camsplat-dataset"
DATASET_VERSION = 1


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


class CorruptImageError(DatasetError):
    pass


@dataclass
class Blob:
    center: tuple[float, float]  # normalized [0, 1] image coords (x right, y down)
    radius: float                # fraction of the shorter image side
    depth: float                 # attenuation at the blob center, in [0, 1]
    emission: tuple[float, float, float]

    def center_px(self, width: int, height: int) -> tuple[float, float]:
        return self.center[0] * (width - 1), self.center[1] * (height - 1)

    def radius_px(self, width: int, height: int) -> float:
        return self.radius * min(width, height)


@dataclass
class DistortionSpec:
    vignette_kind: str = "none"
    a2: float = 0.0
    a4: float = 0.0
    blobs: list[Blob] = field(default_factory=list)
    r_coc_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.vignette_kind not in ("none", "polynomial"):
            raise ValueError(f"unknown vignette kind {self.vignette_kind!r}")
        if self.r_coc_px < 0:
            raise ValueError("r_coc_px must be >= 0")
        for b in self.blobs:
            if b.radius <= 0:
                raise ValueError("blob radius must be > 0")
            if not 0.0 <= b.depth <= 1.0:
                raise ValueError("blob depth must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "r_coc_px": float(self.r_coc_px),
            "vignette": {"kind": self.vignette_kind, "a2": float(self.a2), "a4": float(self.a4)},
            "blobs": [{"center": [float(c) for c in b.center], "radius": float(b.radius),
                       "depth": float(b.depth), "emission": [float(e) for e in b.emission]}
                      for b in self.blobs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DistortionSpec:
        vig = d.get("vignette", {})
        blobs = [Blob(tuple(b["center"]), float(b["radius"]), float(b.get("depth", 0.0)),
                      tuple(b.get("emission", (0.0, 0.0, 0.0)))) for b in d.get("blobs", [])]
        return cls(vig.get("kind", "none"), float(vig.get("a2", 0.0)), float(vig.get("a4", 0.0)),
                   blobs, float(d.get("r_coc_px", 0.0)), int(d.get("seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> DistortionSpec:
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def dumps(self) -> str:
        d = self.to_dict()
        if not d["blobs"]:
            del d["blobs"]  # TOML has no empty array-of-tables
        return tomli_w.dumps(d)


def gen_vignette(spec: DistortionSpec, width: int, height: int) -> np.ndarray:
    """V = 1 - a2 r^2 - a4 r^4, r = distance from the image center with the corner pixel at r = 1."""
    if spec.vignette_kind == "none":
        return np.ones((height, width))
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / (cx * cx + cy * cy)
    v = 1.0 - spec.a2 * r2 - spec.a4 * r2 * r2
    if np.any(v <= 0):
        raise ValueError(f"vignette coefficients a2={spec.a2}, a4={spec.a4} drive V <= 0")
    return np.minimum(v, 1.0)


def blob_bump(blob: Blob, width: int, height: int) -> np.ndarray:
    cx, cy = blob.center_px(width, height)
    rad = blob.radius_px(width, height)
    ys, xs = np.mgrid[0:height, 0:width]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * rad * rad))


def gen_contamination(spec: DistortionSpec, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """(S_alpha H x W, S_beta H x W x 3) from unit-peak Gaussian bumps."""
    s_alpha = np.ones((height, width))
    s_beta = np.zeros((height, width, 3))
    for blob in spec.blobs:
        g = blob_bump(blob, width, height)
        s_alpha *= 1.0 - blob.depth * g
        s_beta += g[..., None] * np.asarray(blob.emission, float)
    return np.clip(s_alpha, 0.0, 1.0), np.maximum(s_beta, 0.0)


def apply_distortion(images: np.ndarray, spec: DistortionSpec, clip: bool = True) -> np.ndarray:
    """I = V * DiskMean[S_alpha * R + S_beta] on one H x W x 3 image or a stack of them."""
    images = np.asarray(images, float)
    single = images.ndim == 3
    stack = images[None] if single else images
    h, w = stack.shape[1:3]
    v = gen_vignette(spec, w, h)[..., None]
    s_alpha, s_beta = gen_contamination(spec, w, h)
    out = np.stack([v * ad.disk_mean(s_alpha[..., None] * img + s_beta, spec.r_coc_px)
                    for img in stack])
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def gt_effective_map(spec: DistortionSpec, width: int, height: int) -> np.ndarray:
    """Response of the ground-truth distortion to a uniform white input."""
    return apply_distortion(np.ones((height, width, 3)), spec, clip=False)


# -- scene presets --------------------------------------------------------------

@dataclass
class ScenePreset:
    cloud: GaussianCloud
    views: list[CameraView]
    background: tuple[float, float, float]


def _random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _color_field(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = 0.5 + 0.35 * np.stack([np.sin(2.2 * points[:, 0] + 0.3),
                                  np.sin(2.0 * points[:, 1] + 1.9),
                                  np.sin(2.4 * points[:, 2] + 4.0)], axis=1)
    return np.clip(base + rng.uniform(-0.2, 0.2, size=base.shape), 0.05, 0.95)


def _orbit_views(rng, n_views, width, height, radius, elevation_deg, half_fov_deg) -> list[CameraView]:
    f = 0.5 * min(width, height) / np.tan(np.radians(half_fov_deg))
    views = []
    lo, hi = elevation_deg
    for i in range(n_views):
        az = 2 * np.pi * i / n_views + rng.uniform(-0.1, 0.1)
        el = np.radians(rng.uniform(lo, hi))
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        views.append(CameraView.look_at(eye, [0, 0, 0], [0, 0, 1], f, f,
                                        (width - 1) / 2.0, (height - 1) / 2.0, width, height))
    return views


def boxgrid(n_gaussians: int = 300, n_views: int = 20, width: int = 96, height: int = 96,
            seed: int = 0, scale_frac: float = 0.45) -> ScenePreset:
    """Colored Gaussians on a jittered grid filling [-1, 1]^3."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(n_gaussians ** (1 / 3)))
    axis = np.linspace(-1, 1, side)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    pick = np.sort(rng.choice(len(grid), size=n_gaussians, replace=False))
    spacing = 2.0 / max(side - 1, 1)
    centers = grid[pick] + rng.uniform(-0.25, 0.25, size=(n_gaussians, 3)) * spacing
    scales = spacing * scale_frac * rng.uniform(0.7, 1.4, size=(n_gaussians, 3))
    colors = _color_field(centers, rng)
    cloud = GaussianCloud.from_arrays(centers, np.log(scales), _random_rotations(rng, n_gaussians),
                                      np.full(n_gaussians, np.log(0.9 / 0.1)),
                                      np.log(colors / (1 - colors)), requires_grad=False)
    views = _orbit_views(rng, n_views, width, height, 4.0, (10.0, 35.0), 35.0)
    return ScenePreset(cloud, views, (0.5, 0.5, 0.5))


def shell(n_gaussians: int = 300, n_views: int = 20, width: int = 96, height: int = 96,
          seed: int = 0) -> ScenePreset:
    """Gaussians on the unit sphere (Fibonacci lattice)."""
    rng = np.random.default_rng(seed)
    i = np.arange(n_gaussians) + 0.5
    phi = np.arccos(1 - 2 * i / n_gaussians)
    theta = np.pi * (1 + 5**0.5) * i
    centers = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    spacing = np.sqrt(4 * np.pi / n_gaussians)
    scales = np.column_stack([np.full(n_gaussians, 0.6 * spacing)] * 2 + [np.full(n_gaussians, 0.15 * spacing)])
    # flatten each Gaussian along its surface normal
    z = np.array([0.0, 0.0, 1.0])
    quats = np.zeros((n_gaussians, 4))
    for k, nrm in enumerate(centers):
        axis_ = np.cross(z, nrm)
        s = np.linalg.norm(axis_)
        ang = np.arctan2(s, nrm @ z)
        axis_ = axis_ / s if s > 1e-12 else np.array([1.0, 0.0, 0.0])
        quats[k] = [np.cos(ang / 2), *(np.sin(ang / 2) * axis_)]
    colors = _color_field(centers, rng)
    cloud = GaussianCloud.from_arrays(centers, np.log(scales), quats,
                                      np.full(n_gaussians, np.log(0.9 / 0.1)),
                                      np.log(colors / (1 - colors)), requires_grad=False)
    views = _orbit_views(rng, n_views, width, height, 3.0, (-20.0, 40.0), 35.0)
    return ScenePreset(cloud, views, (0.5, 0.5, 0.5))


PRESETS = {"boxgrid": boxgrid, "shell": shell}


def make_preset(name: str, **kwargs) -> ScenePreset:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def render_clean(preset: ScenePreset) -> np.ndarray:
    with ad.no_grad():
        return np.stack([render(preset.cloud, v, preset.background).image.values for v in preset.views])


def sparse_points(cloud: GaussianCloud, seed: int, noise: float = 0.03) -> np.ndarray:
    """Noisy copies of the ground-truth centers, standing in for an SfM point cloud."""
    rng = np.random.default_rng(seed + 1)
    pts = cloud.centers.values
    return pts + rng.normal(scale=noise, size=pts.shape)


# -- dataset on disk --------------------------------------------------------------

@dataclass
class Dataset:
    root: Path | None
    views: list[CameraView]
    images: np.ndarray                     # N x H x W x 3 observed (distorted) images
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    clean: np.ndarray | None = None        # N x H x W x 3
    vignette: np.ndarray | None = None     # H x W
    s_alpha: np.ndarray | None = None      # H x W
    s_beta: np.ndarray | None = None       # H x W x 3
    spec: DistortionSpec | None = None
    points: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.views[0].width

    @property
    def height(self) -> int:
        return self.views[0].height

    @property
    def has_gt(self) -> bool:
        return self.clean is not None


def synthesize(spec: DistortionSpec, preset: str = "boxgrid", seed: int = 0,
               **preset_kwargs) -> Dataset:
    """In-memory dataset, quantized exactly as ``write_dataset`` would store it."""
    scene = make_preset(preset, seed=seed, **preset_kwargs)
    clean = render_clean(scene)
    distorted = apply_distortion(clean, spec)
    w, h = scene.views[0].width, scene.views[0].height
    s_alpha, s_beta = gen_contamination(spec, w, h)
    return Dataset(None, scene.views, quantize(distorted) / MAX16, scene.background,
                   quantize(clean) / MAX16, gen_vignette(spec, w, h), s_alpha, s_beta, spec,
                   sparse_points(scene.cloud, seed))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(out_dir: str | Path, views: list[CameraView], clean: np.ndarray,
                  distorted: np.ndarray, spec: DistortionSpec,
                  background=(0.0, 0.0, 0.0), points: np.ndarray | None = None) -> Path:
    out = Path(out_dir)
    if len(views) != len(clean) or len(views) != len(distorted):
        raise ValueError(f"count mismatch: {len(views)} views, {len(clean)} clean, {len(distorted)} distorted")
    for sub in ("images", "clean", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    w, h = views[0].width, views[0].height
    files: list[str] = []
    entries = []
    for i, (view, c, d) in enumerate(zip(views, clean, distorted)):
        img_rel, clean_rel = f"images/{i:04d}.png", f"clean/{i:04d}.png"
        write_png16(out / img_rel, d)
        write_png16(out / clean_rel, c)
        files += [img_rel, clean_rel]
        entries.append({"image": img_rel, "clean": clean_rel,
                        "world_to_camera": [float(x) for x in view.world_to_camera.ravel()]})

    s_alpha, s_beta = gen_contamination(spec, w, h)
    beta_vmax = max(1.0, float(s_beta.max()))
    write_png16(out / "gt/vignette.png", gen_vignette(spec, w, h))
    write_png16(out / "gt/s_alpha.png", s_alpha)
    write_png16(out / "gt/s_beta.png", s_beta, v_max=beta_vmax)
    (out / "spec.toml").write_text(spec.dumps())
    files += ["gt/vignette.png", "gt/s_alpha.png", "gt/s_beta.png", "spec.toml"]

    v0 = views[0]
    manifest = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "width": w, "height": h, "fx": v0.fx, "fy": v0.fy, "cx": v0.cx, "cy": v0.cy,
        "background": [float(b) for b in background],
        "views": entries,
        "gt": {"vignette": "gt/vignette.png", "s_alpha": "gt/s_alpha.png",
               "s_beta": "gt/s_beta.png", "s_beta_vmax": beta_vmax, "spec": spec.to_dict()},
    }
    if points is not None:
        np.savetxt(out / "points3d.txt", points, fmt="%.17g")
        manifest["points"] = "points3d.txt"
        files.append("points3d.txt")
    manifest["checksums"] = {rel: _sha256(out / rel) for rel in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def _require(d: dict, key: str, where: str = "manifest"):
    if key not in d:
        raise ManifestError(f"{where}: missing key {key!r}")
    return d[key]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: malformed JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise ManifestError(f"{mpath}: not a {DATASET_FORMAT} manifest")
    checksums = manifest.get("checksums", {})

    def resolve(rel: str) -> Path:
        path = root / rel
        if not path.is_file():
            raise MissingFileError(f"missing file: {path}")
        want = checksums.get(rel)
        if want is None:
            raise ManifestError(f"{mpath}: no checksum recorded for {rel}")
        if _sha256(path) != want:
            raise ChecksumError(f"checksum mismatch: {path}")
        return path

    def image(rel: str, v_max: float = 1.0) -> np.ndarray:
        try:
            return read_png16(resolve(rel), v_max)
        except ImageDecodeError as exc:
            raise CorruptImageError(str(exc)) from exc

    w, h = int(_require(manifest, "width")), int(_require(manifest, "height"))
    intr = [float(_require(manifest, k)) for k in ("fx", "fy", "cx", "cy")]
    entries = _require(manifest, "views")
    if not entries:
        raise ManifestError(f"{mpath}: no views")
    views, images, clean = [], [], []
    for i, e in enumerate(entries):
        pose = np.asarray(_require(e, "world_to_camera", f"view {i}"), dtype=float)
        if pose.size != 16:
            raise ManifestError(f"view {i}: world_to_camera must have 16 entries")
        try:
            views.append(CameraView(*intr, w, h, pose.reshape(4, 4)))
        except ValueError as exc:
            raise ManifestError(f"view {i}: {exc}") from exc
        img = image(_require(e, "image", f"view {i}"))
        if img.shape != (h, w, 3):
            raise ManifestError(f"view {i}: image shape {img.shape} != {(h, w, 3)}")
        images.append(img)
        if "clean" in e:
            clean.append(image(e["clean"]))

    ds = Dataset(root, views, np.stack(images),
                 tuple(float(b) for b in manifest.get("background", (0.0, 0.0, 0.0))))
    if clean:
        if len(clean) != len(images):
            raise ManifestError(f"{mpath}: clean images present for only some views")
        ds.clean = np.stack(clean)
    gt = manifest.get("gt")
    if gt:
        ds.vignette = image(gt["vignette"])
        ds.s_alpha = image(gt["s_alpha"])
        ds.s_beta = image(gt["s_beta"], float(gt.get("s_beta_vmax", 1.0)))
        ds.spec = DistortionSpec.from_dict(gt.get("spec", {}))
    if "points" in manifest:
        ds.points = np.loadtxt(resolve(manifest["points"]), ndmin=2)
    return ds
