from __future__ import annotations

import numpy as np
import pytest

from camsplat.optimize.config import TrainConfig
from camsplat.synth import Blob, DistortionSpec, synthesize

VIGNETTE = DistortionSpec("polynomial", a2=0.45)
BLOBS = DistortionSpec(blobs=[Blob((0.3, 0.3), 0.07, 0.6, (0.5, 0.5, 0.55)),
                              Blob((0.72, 0.4), 0.06, 0.5, (0.45, 0.45, 0.5)),
                              Blob((0.45, 0.75), 0.08, 0.6, (0.5, 0.5, 0.5))],
                       r_coc_px=4.0)


def tiny_dataset(spec: DistortionSpec = VIGNETTE, seed: int = 1):
    """Six 32x32 views of a 40-Gaussian boxgrid: fast enough for unit tests."""
    return synthesize(spec, "boxgrid", seed=seed, n_gaussians=40, n_views=6, width=32, height=32)


def tiny_config(**changes) -> TrainConfig:
    base = dict(total_blocks=3, scene_steps_per_block=4, camera_steps_per_block=3,
                camera_hidden=[8, 8], encoding_freqs=2, r_coc_px=1.0, test_every=3)
    base.update(changes)
    return TrainConfig.from_dict(base)


@pytest.fixture(scope="session")
def vignette_tiny():
    return tiny_dataset(VIGNETTE)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
