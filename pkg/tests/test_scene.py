from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camsplat import autodiff as ad
from camsplat.scene import (ALPHA_MIN, SIGMA_MIN, CameraView, GaussianCloud, init_cloud,
                            inverse_depth_weight, load_cloud, project_gaussians, project_points,
                            render, render_depth_regularized, save_cloud)

LOGIT_ONE = 40.0  # sigmoid(40) == 1.0 in float64


def logit(p):
    p = np.asarray(p, float)
    return np.log(p / (1 - p))


def axis_view(size=32, f=100.0):
    c = size / 2
    return CameraView(f, f, c, c, size, size)


def cloud_of(centers, opac, colors=None, scale=0.05, requires_grad=True):
    centers = np.asarray(centers, float).reshape(-1, 3)
    n = len(centers)
    log_scales = np.log(np.broadcast_to(np.asarray(scale, float), (n, 3)).copy())
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if colors is None:
        color_logits = np.zeros((n, 3))
    else:
        color_logits = np.where(np.asarray(colors) >= 1, LOGIT_ONE,
                                np.where(np.asarray(colors) <= 0, -LOGIT_ONE, logit(np.clip(colors, 1e-9, 1 - 1e-9))))
    return GaussianCloud.from_arrays(centers, log_scales, rots, logit(opac), color_logits,
                                     requires_grad=requires_grad)


def random_cloud(rng, n, opac_hi=0.5, spread=0.35):
    centers = np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(1.6, 2.6, n)])
    q = rng.normal(size=(n, 4))
    return GaussianCloud.from_arrays(centers, np.log(rng.uniform(0.03, 0.12, (n, 3))), q,
                                     logit(rng.uniform(0.1, opac_hi, n)), rng.normal(size=(n, 3)))


def brute_render(cloud, view, background):
    """Per-pixel loop over every Gaussian in global depth order; no early termination."""
    with ad.no_grad():
        proj = project_gaussians(cloud, view)
    means, cov = proj.means2d.values, proj.cov2d.values
    opac, cols = proj.opacity.values, proj.colors.values
    img = np.zeros((view.height, view.width, 3))
    for y in range(view.height):
        for x in range(view.width):
            t, c = 1.0, np.zeros(3)
            for j in range(len(means)):
                s = np.array([[cov[j, 0], cov[j, 1]], [cov[j, 1], cov[j, 2]]])
                d = np.array([x - means[j, 0], y - means[j, 1]])
                a = opac[j] * math.exp(-0.5 * d @ np.linalg.solve(s, d))
                if a < ALPHA_MIN:
                    continue
                a = min(a, 0.99)
                c += t * a * cols[j]
                t *= 1 - a
            img[y, x] = c + t * np.asarray(background)
    return img


# -- projection -----------------------------------------------------------------

def test_on_axis_projection():
    view = CameraView(100, 100, 32, 32, 64, 64)
    pix, z = project_points(np.array([[0.0, 0.0, 2.0]]), view)
    np.testing.assert_allclose(pix[0], [32, 32])
    assert z[0] == 2.0


def test_off_axis_projection():
    view = CameraView(100, 100, 32, 32, 64, 64)
    pix, _ = project_points(np.array([[0.2, 0.0, 2.0]]), view)
    np.testing.assert_allclose(pix[0], [42, 32], atol=1e-12)


def test_behind_camera_culled():
    view = CameraView(100, 100, 32, 32, 64, 64)
    cloud = cloud_of([[0, 0, -1.0], [0, 0, 2.0]], [0.5, 0.5])
    assert list(project_gaussians(cloud, view).index) == [1]


def test_cov2d_floor_and_symmetry():
    view = CameraView(100, 100, 32, 32, 64, 64)
    cloud = cloud_of([[0, 0, 2.0]], [0.5], scale=1e-6)
    cov = project_gaussians(cloud, view).cov2d.values[0]
    np.testing.assert_allclose(cov, [0.3, 0.0, 0.3], atol=1e-9)


def test_projection_sorted_front_to_back():
    rng = np.random.default_rng(0)
    proj = project_gaussians(random_cloud(rng, 10), axis_view())
    assert np.all(np.diff(proj.depth) >= 0)


def test_gradcheck_projection():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 6)
    view = axis_view()
    wm, wc = rng.normal(size=(6, 2)), rng.normal(size=(6, 3))

    def f():
        p = project_gaussians(cloud, view)
        order = p.index
        return (p.means2d * wm[order]).sum() + (p.cov2d * wc[order]).sum()

    err = ad.gradcheck(f, [cloud.centers, cloud.log_scales, cloud.rotations])
    assert err <= 1e-6


# -- render examples -----------------------------------------------------------

def test_single_gaussian_pixel():
    view = axis_view()
    cloud = cloud_of([[0, 0, 2.0]], [0.8], colors=[[1, 0, 0]])
    img = render(cloud, view).image.values
    np.testing.assert_allclose(img[16, 16], [0.8, 0, 0], atol=1e-12)


def test_two_coincident_gaussians():
    view = axis_view()
    cloud = cloud_of([[0, 0, 2.0], [0, 0, 2.0]], [0.5, 0.5], colors=[[1, 1, 1], [1, 1, 1]])
    img = render(cloud, view).image.values
    np.testing.assert_allclose(img[16, 16], [0.75] * 3, atol=1e-12)


def test_empty_cloud_is_background():
    cloud = GaussianCloud.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                                      np.zeros(0), np.zeros((0, 3)))
    img = render(cloud, axis_view(), background=(0.1, 0.2, 0.3)).image.values
    assert np.all(img == np.array([0.1, 0.2, 0.3]))


def test_all_culled_is_background():
    cloud = cloud_of([[0, 0, -3.0]], [0.9])
    img = render(cloud, axis_view(), background=(0.4, 0.4, 0.4)).image.values
    assert np.all(img == 0.4)


@pytest.mark.parametrize("seed", range(4))
def test_render_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, int(rng.integers(1, 11)))
    view = axis_view(32)
    bg = rng.uniform(size=3)
    got = render(cloud, view, bg).image.values
    assert np.abs(got - brute_render(cloud, view, bg)).max() <= 1e-10


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 10))
def test_render_matches_brute_force_property(seed, n):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n)
    view = axis_view(16, f=50.0)
    assert np.abs(render(cloud, view).image.values - brute_render(cloud, view, np.zeros(3))).max() <= 1e-10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 40))
def test_blend_weights_and_radiance_range(seed, n):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n, opac_hi=0.99)
    res = render(cloud, axis_view(24, f=60.0))
    pairs = res.pairs
    assert np.all((pairs.weight >= 0) & (pairs.weight <= 1))
    per_pixel = np.bincount(pairs.seg, pairs.weight, minlength=len(pairs.pixel))
    assert np.all(per_pixel <= 1 + 1e-12)
    np.testing.assert_allclose(per_pixel + pairs.t_final, 1.0, atol=1e-12)
    img = res.image.values
    assert img.min() >= 0 and img.max() <= 1 + 1e-12


def test_early_termination():
    # opacity 0.98: T runs 1, 0.02, 4e-4, 8e-6, so the fourth entry falls below 1e-4
    view = axis_view()
    z = np.linspace(2.0, 2.5, 6)
    cloud = cloud_of(np.column_stack([np.zeros(6), np.zeros(6), z]), [0.98] * 6)
    pairs = render(cloud, view).pairs
    k = pairs.pixel.tolist().index(16 * 32 + 16)
    assert int((pairs.seg == k).sum()) == 3


# -- depth statistics and the depth-regularized render --------------------------

def test_depth_stats_single_contributor():
    cloud = cloud_of([[0, 0, 2.0]], [0.8])
    stats = render(cloud, axis_view()).depth
    assert stats.mean[16, 16] == pytest.approx(0.5, abs=1e-15)
    assert stats.std[16, 16] == SIGMA_MIN


def test_depth_stats_two_equal_weights():
    # alpha 0.25 then 1/3 gives blend weights 0.25 and 0.25
    cloud = cloud_of([[0, 0, 1 / 0.6], [0, 0, 2.5]], [0.25, 1 / 3], scale=0.01)
    stats = render(cloud, axis_view()).depth
    assert stats.mean[16, 16] == pytest.approx(0.5, abs=1e-12)
    assert stats.std[16, 16] == pytest.approx(0.1, abs=1e-12)


def test_depth_stats_identical_depth_floored():
    cloud = cloud_of([[0, 0, 2.0], [0.001, 0, 2.0], [0, 0.001, 2.0]], [0.5, 0.6, 0.7])
    stats = render(cloud, axis_view()).depth
    assert stats.std[16, 16] == SIGMA_MIN


def test_uncovered_pixels_marked():
    cloud = cloud_of([[0, 0, 2.0]], [0.8], scale=0.01)
    stats = render(cloud, axis_view()).depth
    assert stats.mean[0, 0] == 0 and not stats.covered[0, 0]
    assert stats.covered[16, 16]


def test_inverse_depth_weight_values():
    assert inverse_depth_weight(0.6, 0.5, 0.1) == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert inverse_depth_weight(0.7, 0.5, 0.1) == pytest.approx(math.exp(-2.0), rel=1e-12)
    assert inverse_depth_weight(0.5, 0.5, 0.1) == 1.0
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=5e-6)
    assert math.exp(-2.0) == pytest.approx(0.13534, abs=5e-6)


@settings(max_examples=40, deadline=None)
@given(idv=st.floats(0.01, 10), mu=st.floats(0.01, 10), sd=st.floats(SIGMA_MIN, 5))
def test_inverse_depth_weight_range(idv, mu, sd):
    g = inverse_depth_weight(idv, mu, sd)
    assert 0 <= g <= 1
    if abs(idv - mu) <= 3 * sd:  # within 3 sigma the weight cannot underflow to 0
        assert g > 0


def test_depth_reg_equals_render_on_single_depth_rays():
    rng = np.random.default_rng(3)
    n = 12
    centers = np.column_stack([rng.uniform(-0.2, 0.2, (n, 2)), np.full(n, 2.0)])
    cloud = cloud_of(centers, rng.uniform(0.2, 0.9, n), colors=rng.uniform(size=(n, 3)))
    view = axis_view()
    bg = np.array([0.2, 0.5, 0.1])
    with ad.no_grad():
        plain = render(cloud, view, bg).image.values
    reg = render_depth_regularized(cloud, view, background=bg)
    assert np.abs(plain - reg).max() <= 1e-14


def test_depth_reg_literal_formula():
    # two contributors on the central ray, unmodified transmittance
    cloud = cloud_of([[0, 0, 1 / 0.6], [0, 0, 2.5]], [0.25, 1 / 3], scale=0.01,
                     colors=[[1, 0, 0], [0, 1, 0]])
    view = axis_view()
    bg = np.array([0.0, 0.0, 1.0])
    reg = render_depth_regularized(cloud, view, background=bg)[16, 16]
    g = math.exp(-0.5)  # both sit one sigma from the mean
    t_final = 0.75 * (2 / 3)
    np.testing.assert_allclose(reg, [0.25 * g, 0.25 * g, t_final], atol=1e-12)


def test_depth_reg_accepts_precomputed_stats():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 10)
    view = axis_view()
    stats = render(cloud, view).depth
    a = render_depth_regularized(cloud, view, stats)
    b = render_depth_regularized(cloud, view)
    np.testing.assert_array_equal(a, b)


# -- gradients through the rasterizer -------------------------------------------

def _weighted_render(cloud, view, w, bg):
    return lambda: (render(cloud, view, bg).image * w).sum()


def test_gradcheck_opacity_and_color():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 10, opac_hi=0.9)
    view = axis_view(20, f=60.0)
    w = rng.normal(size=(20, 20, 3))
    err = ad.gradcheck(_weighted_render(cloud, view, w, np.array([0.3, 0.1, 0.2])),
                       [cloud.opacity_logits, cloud.color_logits])
    assert err <= 1e-5


def test_gradcheck_plain_sum():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 8)
    view = axis_view(20, f=60.0)
    f = lambda: render(cloud, view).image.sum()  # noqa: E731
    assert ad.gradcheck(f, [cloud.opacity_logits, cloud.color_logits]) <= 1e-5


def _pair_signature(cloud, view):
    with ad.no_grad():
        pairs = render(cloud, view).pairs
    return pairs.pixel.tobytes() + pairs.gid.tobytes() + pairs.seg.tobytes()


@pytest.mark.parametrize("name", ["centers", "log_scales", "rotations"])
def test_gradcheck_geometry_where_floor_inactive(name):
    """Entries whose +-h perturbation changes the pair set (alpha floor crossing) are skipped."""
    rng = np.random.default_rng(8)
    cloud = random_cloud(rng, 6, opac_hi=0.9)
    view = axis_view(20, f=60.0)
    w = rng.normal(size=(20, 20, 3))
    f = _weighted_render(cloud, view, w, np.zeros(3))
    param = getattr(cloud, name)
    param.zero_grad()
    ad.backward(f())
    analytic = param.grad.copy()
    h = 1e-6
    base = _pair_signature(cloud, view)
    num, ana = [], []
    flat = param.values.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        with ad.no_grad():
            fp = float(f().values)
        sig_p = _pair_signature(cloud, view)
        flat[i] = old - h
        with ad.no_grad():
            fm = float(f().values)
        sig_m = _pair_signature(cloud, view)
        flat[i] = old
        if sig_p == base and sig_m == base:
            num.append((fp - fm) / (2 * h))
            ana.append(analytic.reshape(-1)[i])
    num, ana = np.array(num), np.array(ana)
    assert len(num) >= 0.8 * flat.size
    assert np.abs(num - ana).max() / max(np.abs(num).max(), np.abs(ana).max()) <= 1e-5


# -- cloud, view and checkpoint -------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_covariance_spd(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 5)
    cov = cloud.covariances()
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_opacity_and_colors_in_open_interval():
    cloud = random_cloud(np.random.default_rng(9), 30)
    assert np.all((cloud.opacities() > 0) & (cloud.opacities() < 1))
    assert np.all((cloud.colors() > 0) & (cloud.colors() < 1))


def test_checkpoint_round_trip(tmp_path):
    cloud = random_cloud(np.random.default_rng(10), 17)
    cloud.iteration = 123
    save_cloud(tmp_path / "scene.npz", cloud)
    back = load_cloud(tmp_path / "scene.npz")
    assert back.iteration == 123
    assert back.checksum() == cloud.checksum()
    for name, t in cloud.parameters().items():
        np.testing.assert_array_equal(getattr(back, name).values, t.values)


def test_init_cloud_deterministic():
    pts = np.random.default_rng(11).uniform(-1, 1, (50, 3))
    assert init_cloud(pts, seed=3).checksum() == init_cloud(pts, seed=3).checksum()


@pytest.mark.parametrize("kwargs", [
    dict(fx=-1.0), dict(cx=0.0), dict(cy=40.0),
    dict(world_to_camera=np.diag([1.0, 1.0, -1.0, 1.0])),
    dict(world_to_camera=np.eye(3)),
])
def test_camera_view_validation(kwargs):
    args = dict(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)
    args.update(kwargs)
    with pytest.raises(ValueError):
        CameraView(**args)


def test_look_at_centers_target():
    view = CameraView.look_at([0, 0, -4], [0, 0, 0], [0, -1, 0], 50, 50, 16, 16, 32, 32)
    pix, z = project_points(np.zeros((1, 3)), view)
    np.testing.assert_allclose(pix[0], [16, 16], atol=1e-12)
    assert z[0] == pytest.approx(4.0)


def test_modified_transmittance_single_depth_equality():
    rng = np.random.default_rng(12)
    n = 10
    centers = np.column_stack([rng.uniform(-0.2, 0.2, (n, 2)), np.full(n, 2.0)])
    cloud = cloud_of(centers, rng.uniform(0.2, 0.9, n), colors=rng.uniform(size=(n, 3)))
    view = axis_view()
    with ad.no_grad():
        plain = render(cloud, view, (0.3, 0.3, 0.3)).image.values
    reg = render_depth_regularized(cloud, view, background=(0.3, 0.3, 0.3), modified_transmittance=True)
    assert np.abs(plain - reg).max() <= 1e-12


def test_modified_transmittance_hand_example():
    cloud = cloud_of([[0, 0, 1 / 0.6], [0, 0, 2.5]], [0.25, 1 / 3], scale=0.01,
                     colors=[[1, 0, 0], [0, 1, 0]])
    g = math.exp(-0.5)
    a1, a2 = 0.25 * g, g / 3
    reg = render_depth_regularized(cloud, axis_view(), background=(0, 0, 1),
                                   modified_transmittance=True)[16, 16]
    np.testing.assert_allclose(reg, [a1, (1 - a1) * a2, (1 - a1) * (1 - a2)], atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_modified_transmittance_conserves_energy(seed):
    # white Gaussians on a white background: every pixel must stay exactly white
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 15, opac_hi=0.95)
    cloud.color_logits.values[:] = LOGIT_ONE
    reg = render_depth_regularized(cloud, axis_view(20, f=60.0), background=(1, 1, 1),
                                   modified_transmittance=True)
    np.testing.assert_allclose(reg, 1.0, atol=1e-12)
