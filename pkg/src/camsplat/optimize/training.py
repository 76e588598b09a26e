"""Alternating camera / scene optimization."""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from camsplat import autodiff as ad
from camsplat.camera import PhotometricCamera, apply_maps, init_identity, save_camera
from camsplat.metrics import EvalReport
from camsplat.optimize.adam import Adam
from camsplat.optimize.config import TrainConfig
from camsplat.optimize.losses import photometric_loss
from camsplat.scene import CameraView, GaussianCloud, init_cloud, render, render_depth_regularized, save_cloud
from camsplat.synth import Dataset, DatasetError

log = logging.getLogger(__name__)

METRIC_FIELDS = ("block", "phase", "scene_loss", "camera_loss", "clean_psnr", "clean_ssim")


def split_views(n_views: int, test_every: int) -> tuple[list[int], list[int]]:
    """Every ``test_every``-th view (1-based) is held out; 0 holds out nothing."""
    if test_every <= 0:
        return list(range(n_views)), []
    test = [i for i in range(n_views) if i % test_every == test_every - 1]
    train = [i for i in range(n_views) if i % test_every != test_every - 1]
    return train, test


class ViewSampler:
    """Shuffled round robin: every view once per pass, order reshuffled each pass."""

    def __init__(self, indices: Sequence[int], rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.rng = rng
        self._queue: list[int] = []

    def next(self) -> int:
        if not self._queue:
            self._queue = [int(i) for i in self.rng.permutation(self.indices)]
        return self._queue.pop(0)


@contextlib.contextmanager
def frozen(params: Iterable[ad.Tensor]):
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


def resolve_background(config: TrainConfig, dataset: Dataset | None = None) -> np.ndarray:
    if config.background:
        return np.asarray(config.background, float)
    if dataset is not None:
        return np.asarray(dataset.background, float)
    return np.zeros(3)


def make_camera(config: TrainConfig) -> PhotometricCamera:
    return init_identity(config.camera_hidden, config.encoding_freqs, seed=config.seed,
                         r_coc_px=config.r_coc_px if config.defocus_enabled else 0.0,
                         per_channel=config.per_channel)


def initial_cloud(dataset: Dataset, config: TrainConfig) -> GaussianCloud:
    if dataset.points is not None and len(dataset.points):
        return init_cloud(dataset.points, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    return init_cloud(rng.uniform(-1.0, 1.0, size=(config.n_gaussians, 3)), seed=config.seed)


def scene_optimizer(cloud: GaussianCloud, config: TrainConfig) -> Adam:
    return Adam([([cloud.centers], config.lr_centers), ([cloud.log_scales], config.lr_scales),
                 ([cloud.rotations], config.lr_rotations), ([cloud.opacity_logits], config.lr_opacity),
                 ([cloud.color_logits], config.lr_color)])


def camera_phase(cloud: GaussianCloud, camera: PhotometricCamera, views: Sequence[CameraView],
                 images: Sequence[np.ndarray], config: TrainConfig, sampler: ViewSampler,
                 optimizer: Adam, background=None) -> float:
    """Fit the camera against renders of the frozen scene; returns the mean step loss."""
    steps = config.camera_steps_per_block
    if steps == 0:
        return float("nan")
    bg = np.zeros(3) if background is None else background
    cache: dict[int, np.ndarray] = {}
    losses = []
    with frozen(cloud.parameters().values()):
        for _ in range(steps):
            i = sampler.next()
            if i not in cache:
                if config.depth_reg_enabled:
                    cache[i] = render_depth_regularized(
                        cloud, views[i], background=bg, sigma_min=config.sigma_min,
                        modified_transmittance=config.depth_reg_transmittance == "modified")
                else:
                    with ad.no_grad():
                        cache[i] = render(cloud, views[i], bg).image.values
            optimizer.zero_grad()
            ad.get_tape().clear()
            loss = photometric_loss(camera.apply(cache[i]), images[i], config.lambda_ssim)
            ad.backward(loss)
            optimizer.step()
            losses.append(float(loss.values))
    return float(np.mean(losses))


def scene_phase(cloud: GaussianCloud, camera: PhotometricCamera | None, views: Sequence[CameraView],
                images: Sequence[np.ndarray], config: TrainConfig, sampler: ViewSampler,
                optimizer: Adam, background=None) -> float:
    """Fit the scene through a frozen camera (or none); returns the mean step loss."""
    steps = config.scene_steps_per_block
    if steps == 0:
        return float("nan")
    bg = np.zeros(3) if background is None else background
    use_camera = camera is not None and config.camera_enabled
    cam_params = camera.parameters() if camera is not None else []
    maps = None
    if use_camera:
        # the camera is frozen for the whole phase, so its maps are constants
        with ad.no_grad():
            maps = camera.eval_maps(views[0].width, views[0].height)
    losses = []
    with frozen(cam_params):
        for _ in range(steps):
            i = sampler.next()
            optimizer.zero_grad()
            ad.get_tape().clear()
            image = render(cloud, views[i], bg).image
            if maps is not None:
                image = apply_maps(maps.attenuation, maps.beta, maps.gamma, image, camera.r_coc_px)
            loss = photometric_loss(image, images[i], config.lambda_ssim)
            ad.backward(loss)
            optimizer.step()
            cloud.iteration += 1
            losses.append(float(loss.values))
    return float(np.mean(losses))


def clean_space_scores(cloud: GaussianCloud, dataset: Dataset, indices: Sequence[int],
                       background) -> tuple[list, list]:
    from camsplat.metrics import psnr, ssim

    ps, ss = [], []
    with ad.no_grad():
        for i in indices:
            img = render(cloud, dataset.views[i], background).image.values
            ps.append(psnr(img, dataset.clean[i]))
            ss.append(ssim(img, dataset.clean[i]))
    return ps, ss


def validate_dataset(dataset: Dataset) -> None:
    n = len(dataset.views)
    if n == 0:
        raise DatasetError("dataset has no views")
    if len(dataset.images) != n:
        raise DatasetError(f"{n} views but {len(dataset.images)} images")
    h, w = dataset.height, dataset.width
    if dataset.images.shape[1:] != (h, w, 3):
        raise DatasetError(f"image shape {dataset.images.shape[1:]} does not match views ({h}, {w}, 3)")
    if any(v.width != w or v.height != h for v in dataset.views):
        raise DatasetError("views disagree on image size")
    if dataset.clean is not None and dataset.clean.shape != dataset.images.shape:
        raise DatasetError("clean images do not match observed images")


@dataclass
class TrainResult:
    cloud: GaussianCloud
    camera: PhotometricCamera
    rows: list[dict] = field(default_factory=list)
    report: EvalReport | None = None
    train_views: list[int] = field(default_factory=list)
    test_views: list[int] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v) if not hasattr(v, "__float__") else repr(float(v))


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])


def train(dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None,
          on_block: Callable[[dict], None] | None = None) -> TrainResult:
    """Warmup scene-only blocks, then alternating camera/scene blocks.

    With ``out_dir`` set, writes scene.npz, camera.npz, metrics.csv and eval.json there.
    """
    from camsplat.evaluate import evaluate

    validate_dataset(dataset)
    config.validate()
    train_idx, test_idx = split_views(len(dataset.views), config.test_every)
    if not train_idx:
        raise DatasetError("no training views left after the held-out split")
    bg = resolve_background(config, dataset)

    cloud = initial_cloud(dataset, config)
    camera = make_camera(config)
    scene_seed, camera_seed = np.random.SeedSequence(config.seed).spawn(2)
    scene_sampler = ViewSampler(train_idx, np.random.default_rng(scene_seed))
    camera_sampler = ViewSampler(train_idx, np.random.default_rng(camera_seed))
    scene_opt = scene_optimizer(cloud, config)
    camera_opt = Adam([(camera.parameters(), config.lr_camera)])
    views, images = dataset.views, dataset.images

    rows = []
    n_warm = config.warmup_blocks
    for block in range(n_warm + config.total_blocks):
        warm = block < n_warm
        cam_loss = None
        if not warm and config.camera_enabled:
            cam_loss = camera_phase(cloud, camera, views, images, config, camera_sampler,
                                    camera_opt, bg)
        scene_loss = scene_phase(cloud, camera if config.camera_enabled else None, views, images,
                                 config, scene_sampler, scene_opt, bg)
        row = {"block": block, "phase": "warmup" if warm else "joint",
               "scene_loss": scene_loss, "camera_loss": cam_loss}
        if dataset.has_gt and test_idx:
            ps, ss = clean_space_scores(cloud, dataset, test_idx, bg)
            row["clean_psnr"] = float(np.mean(ps))
            row["clean_ssim"] = float(np.mean(ss))
        rows.append(row)
        log.info("block %d %s", block, row)
        if on_block is not None:
            on_block(row)

    report = evaluate(dataset, cloud, camera if config.camera_enabled else None, config)
    result = TrainResult(cloud, camera, rows, report, train_idx, test_idx)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_cloud(out / "scene.npz", cloud)
        save_camera(out / "camera.npz", camera)
        write_metrics(out / "metrics.csv", rows)
        (out / "eval.json").write_text(report.to_json())
    return result
