"""Evaluation of a trained scene/camera pair against a dataset."""

from __future__ import annotations

import numpy as np

from camsplat import autodiff as ad
from camsplat.camera import PhotometricCamera, export_distortion
from camsplat.metrics import EvalReport, attenuation_error, emission_localization, psnr, ssim
from camsplat.optimize.config import TrainConfig
from camsplat.optimize.training import clean_space_scores, resolve_background, split_views
from camsplat.scene import GaussianCloud, render
from camsplat.synth import Dataset, gt_effective_map


def evaluate(dataset: Dataset, cloud: GaussianCloud, camera: PhotometricCamera | None,
             config: TrainConfig) -> EvalReport:
    """Distorted-space scores on training views, clean-space scores on held-out views,
    and map recovery against the ground-truth distortion when the dataset has one."""
    bg = resolve_background(config, dataset)
    train_idx, test_idx = split_views(len(dataset.views), config.test_every)
    report = EvalReport()
    with ad.no_grad():
        for i in train_idx:
            img = render(cloud, dataset.views[i], bg).image
            if camera is not None:
                img = camera.apply(img)
            report.distorted_psnr.append(psnr(img.values, dataset.images[i]))
            report.distorted_ssim.append(ssim(img.values, dataset.images[i]))
    if dataset.clean is not None:
        ps, ss = clean_space_scores(cloud, dataset, test_idx or train_idx, bg)
        report.clean_psnr, report.clean_ssim = ps, ss

    if dataset.spec is not None:
        w, h = dataset.width, dataset.height
        if camera is not None:
            maps = export_distortion(camera, w, h)
            effective, gamma = maps.effective, maps.gamma
        else:
            effective, gamma = np.ones((h, w, 3)), np.zeros((h, w, 3))
        report.attenuation_mae = attenuation_error(effective, gt_effective_map(dataset.spec, w, h))
        emitters = [b for b in dataset.spec.blobs if max(b.emission) > 0]
        if emitters:
            report.emission_localization_px = emission_localization(
                gamma, [b.center_px(w, h) for b in emitters])
    return report
