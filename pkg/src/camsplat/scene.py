"""3D Gaussian scene, pinhole projection and alpha-blended splatting.

Pixel (column i, row j) has its center at continuous coordinate (i, j).
Projection and rasterization are fused ops with hand-written backward
passes; both are checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camsplat import autodiff as ad
from camsplat.autodiff import Tensor

COV2D_FLOOR = 0.3  # px^2, added to both eigen-directions
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
Z_NEAR = 0.05
SIGMA_MIN = 1e-4
CHECKPOINT_VERSION = 1


@dataclass
class GaussianCloud:
    centers: Tensor
    log_scales: Tensor
    rotations: Tensor
    opacity_logits: Tensor
    color_logits: Tensor
    iteration: int = 0

    PARAM_NAMES = ("centers", "log_scales", "rotations", "opacity_logits", "color_logits")

    @classmethod
    def from_arrays(cls, centers, log_scales, rotations, opacity_logits, color_logits,
                    iteration: int = 0, requires_grad: bool = True) -> GaussianCloud:
        centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        n = len(centers)
        arrays = [centers, np.asarray(log_scales, float).reshape(n, 3),
                  np.asarray(rotations, float).reshape(n, 4),
                  np.asarray(opacity_logits, float).reshape(n),
                  np.asarray(color_logits, float).reshape(n, 3)]
        tensors = [Tensor(a, requires_grad=requires_grad, name=nm)
                   for a, nm in zip(arrays, cls.PARAM_NAMES)]
        return cls(*tensors, iteration=iteration)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def opacities(self) -> np.ndarray:
        return ad._sigmoid(self.opacity_logits.values)

    def colors(self) -> np.ndarray:
        return ad._sigmoid(self.color_logits.values)

    def covariances(self) -> np.ndarray:
        rot, _, _ = quat_to_rotmat(self.rotations.values)
        m = rot * np.exp(self.log_scales.values)[:, None, :]
        return m @ np.swapaxes(m, 1, 2)

    def copy(self, requires_grad: bool = True) -> GaussianCloud:
        return GaussianCloud.from_arrays(
            *(getattr(self, nm).values.copy() for nm in self.PARAM_NAMES),
            iteration=self.iteration, requires_grad=requires_grad)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for nm in self.PARAM_NAMES:
            h.update(getattr(self, nm).values.tobytes())
        return h.hexdigest()


def save_cloud(path: str | Path, cloud: GaussianCloud) -> None:
    """Write an uncompressed ``.npz`` holding every field; float64 arrays round-trip bit-exactly."""
    arrays = {nm: getattr(cloud, nm).values for nm in GaussianCloud.PARAM_NAMES}
    with open(path, "wb") as fh:
        np.savez(fh, iteration=np.int64(cloud.iteration),
                 format_version=np.int64(CHECKPOINT_VERSION), **arrays)


def load_cloud(path: str | Path) -> GaussianCloud:
    with np.load(path) as data:
        if int(data["format_version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported scene checkpoint version {int(data['format_version'])}")
        return GaussianCloud.from_arrays(*(data[nm] for nm in GaussianCloud.PARAM_NAMES),
                                         iteration=int(data["iteration"]))


def init_cloud(points: np.ndarray, seed: int = 0, colors: np.ndarray | None = None,
               opacity: float = 0.5) -> GaussianCloud:
    """Isotropic Gaussians at ``points``; scale from the mean distance to the 3 nearest neighbours."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(points).query(points, k=k)
        nn = np.maximum(dist[:, 1:].mean(axis=1), 1e-3)
    else:
        nn = np.full(n, 0.1)
    rng = np.random.default_rng(seed)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    # tiny seeded jitter keeps quaternion gradients well-conditioned
    rotations[:, 1:] = rng.normal(scale=1e-3, size=(n, 3))
    if colors is None:
        color_logits = np.zeros((n, 3))
    else:
        c = np.clip(np.asarray(colors, float).reshape(n, 3), 0.02, 0.98)
        color_logits = np.log(c / (1 - c))
    return GaussianCloud.from_arrays(
        points, np.log(np.repeat(nn[:, None], 3, axis=1)), rotations,
        np.full(n, np.log(opacity / (1 - opacity))), color_logits)


@dataclass(frozen=True)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.asarray(self.world_to_camera, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"world_to_camera must be 4x4, got {m.shape}")
        object.__setattr__(self, "world_to_camera", m)
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-8) or np.linalg.det(rot) <= 0:
            raise ValueError("world_to_camera rotation block must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> CameraView:
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ eye
        return cls(fx, fy, cx, cy, width, height, m)


@dataclass
class DepthStats:
    """Per-pixel inverse-depth mean and floored std; ``mean == 0`` marks an uncovered pixel."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return self.mean > 0


# -- projection -----------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray):
    """Rotation matrices from (w, x, y, z) quaternions; returns (R, unit q, |q|)."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1)
    qn = q / norm[..., None]
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))
    return rot, qn, norm


def _rotmat_grad_to_quat(g: np.ndarray, qn: np.ndarray, norm: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    # through q / |q|
    return (gqn - qn * (gqn * qn).sum(axis=1, keepdims=True)) / norm[:, None]


@dataclass
class Projection:
    """Projected visible Gaussians, sorted front to back by camera depth."""

    index: np.ndarray      # cloud indices of the visible Gaussians
    means2d: Tensor        # M x 2 pixel coordinates
    cov2d: Tensor          # M x 3 packed (xx, xy, yy), floor included
    depth: np.ndarray      # camera z
    opacity: Tensor        # M
    colors: Tensor         # M x 3

    @property
    def inv_depth(self) -> np.ndarray:
        return 1.0 / self.depth


def project_points(points: np.ndarray, view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and camera depth of world points (no culling)."""
    t = np.asarray(points, float) @ view.rotation.T + view.translation
    z = t[..., 2]
    pix = np.stack([view.fx * t[..., 0] / z + view.cx, view.fy * t[..., 1] / z + view.cy], axis=-1)
    return pix, z


def _project_op(centers: Tensor, log_scales: Tensor, rotations: Tensor,
                idx: np.ndarray, view: CameraView) -> tuple[Tensor, Tensor]:
    wrot, fx, fy = view.rotation, view.fx, view.fy
    mu = centers.values[idx]
    t = mu @ wrot.T + view.translation
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    s = np.exp(log_scales.values[idx])
    rot, qn, qnorm = quat_to_rotmat(rotations.values[idx])
    m = rot * s[:, None, :]
    sigma3 = m @ np.swapaxes(m, 1, 2)
    sigma_c = wrot @ sigma3 @ wrot.T
    n = len(idx)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / tz**2
    cov = jac @ sigma_c @ np.swapaxes(jac, 1, 2)
    cov_packed = np.stack([cov[:, 0, 0] + COV2D_FLOOR, cov[:, 0, 1], cov[:, 1, 1] + COV2D_FLOOR], axis=1)
    means = np.stack([fx * tx / tz + view.cx, fy * ty / tz + view.cy], axis=1)

    inputs = (centers, log_scales, rotations)

    def scatter(full_shape, g):
        out = np.zeros(full_shape)
        np.add.at(out, idx, g)
        return out

    def backward_cov(gcov: np.ndarray):
        g2 = np.zeros((n, 2, 2))
        g2[:, 0, 0] = gcov[:, 0]
        g2[:, 0, 1] = g2[:, 1, 0] = 0.5 * gcov[:, 1]
        g2[:, 1, 1] = gcov[:, 2]
        g_sigma_c = np.swapaxes(jac, 1, 2) @ g2 @ jac
        g_jac = 2.0 * g2 @ jac @ sigma_c
        g_sigma3 = wrot.T @ g_sigma_c @ wrot
        g_m = 2.0 * g_sigma3 @ m
        g_s = (g_m * rot).sum(axis=1)
        g_rot = g_m * s[:, None, :]
        gt = np.zeros((n, 3))
        gt[:, 0] = g_jac[:, 0, 2] * (-fx / tz**2)
        gt[:, 1] = g_jac[:, 1, 2] * (-fy / tz**2)
        gt[:, 2] = (g_jac[:, 0, 0] * (-fx / tz**2) + g_jac[:, 0, 2] * (2 * fx * tx / tz**3)
                    + g_jac[:, 1, 1] * (-fy / tz**2) + g_jac[:, 1, 2] * (2 * fy * ty / tz**3))
        return gt, g_s * s, _rotmat_grad_to_quat(g_rot, qn, qnorm)

    def backward_means(gm: np.ndarray):
        gt = np.zeros((n, 3))
        gt[:, 0] = gm[:, 0] * fx / tz
        gt[:, 1] = gm[:, 1] * fy / tz
        gt[:, 2] = -gm[:, 0] * fx * tx / tz**2 - gm[:, 1] * fy * ty / tz**2
        return gt

    def fn_means(gm):
        return scatter(centers.shape, backward_means(gm) @ wrot), None, None

    def fn_cov(gcov):
        gt, gls, gq = backward_cov(gcov)
        return (scatter(centers.shape, gt @ wrot), scatter(log_scales.shape, gls),
                scatter(rotations.shape, gq))

    means_t = ad.make_op("project_means", means, inputs, fn_means)
    cov_t = ad.make_op("project_cov", cov_packed, inputs, fn_cov)
    return means_t, cov_t


def project_gaussians(cloud: GaussianCloud, view: CameraView) -> Projection:
    """Cull Gaussians behind the near plane, project the rest, sort by depth."""
    _, z = project_points(cloud.centers.values, view)
    idx = np.nonzero(z > Z_NEAR)[0]
    idx = idx[np.argsort(z[idx], kind="stable")]
    means, cov = _project_op(cloud.centers, cloud.log_scales, cloud.rotations, idx, view)
    opacity = ad.sigmoid(ad.getitem(cloud.opacity_logits, idx))
    colors = ad.sigmoid(ad.getitem(cloud.color_logits, idx))
    return Projection(idx, means, cov, z[idx], opacity, colors)


# -- rasterization --------------------------------------------------------------

@dataclass
class RasterPairs:
    """Composited Gaussian/pixel pairs, grouped by pixel and depth ordered inside each group.

    Entries past early termination are already dropped, so every entry counts.
    """

    width: int
    height: int
    pixel: np.ndarray        # Q flat ids of covered pixels
    first: np.ndarray        # Q offset of each pixel's first entry
    seg: np.ndarray          # N pixel slot (index into ``pixel``) of each entry
    gid: np.ndarray          # N projected-Gaussian index
    dx: np.ndarray           # N pixel minus mean
    dy: np.ndarray
    raw_alpha: np.ndarray    # o * g before clamping
    alpha: np.ndarray        # clamped
    trans: np.ndarray        # transmittance before each entry
    weight: np.ndarray       # alpha * trans
    t_final: np.ndarray      # Q residual transmittance


def _segment_cumsum(x: np.ndarray, first: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Inclusive cumulative sum restarting at every segment start.

    Each segment's start is offset by the previous segment's total, so the running
    sum stays at the scale of one segment and rounding does not build up globally.
    """
    if not len(x):
        return x.copy()
    totals = np.add.reduceat(x, first)
    y = x.copy()
    y[first[1:]] -= totals[:-1]
    out = np.cumsum(y)
    # remove the small drift left at each start
    return out - (out[first] - x[first])[seg]


def _conic(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    return c / det, -b / det, a / det


def _build_pairs(means: np.ndarray, cov: np.ndarray, opacity: np.ndarray,
                 width: int, height: int) -> RasterPairs:
    m = len(means)
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    # beyond this Mahalanobis radius o*g < 1/255, so the box drops nothing that counts
    reach = np.log(np.maximum(255.0 * opacity, 1.0))
    radius = np.sqrt(2.0 * reach * lam_max)
    x0 = np.maximum(np.ceil(means[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(means[:, 0] + radius), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(means[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(means[:, 1] + radius), height - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    hy = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(reach > 0, wx * hy, 0)

    total = int(counts.sum())
    g = np.repeat(np.arange(m), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    wxg = np.maximum(wx[g], 1)
    px = x0[g] + local % wxg
    py = y0[g] + local // wxg

    ca, cb, cc = _conic(cov)
    dx = px - means[g, 0]
    dy = py - means[g, 1]
    power = -0.5 * (ca[g] * dx * dx + cc[g] * dy * dy) - cb[g] * dx * dy
    raw = opacity[g] * np.exp(power)
    keep = raw >= ALPHA_MIN
    g, px, py, dx, dy, raw = g[keep], px[keep], py[keep], dx[keep], dy[keep], raw[keep]

    pix = py * width + px
    order = np.argsort(pix, kind="stable")  # pairs were generated in depth order
    g, pix, dx, dy, raw = g[order], pix[order], dx[order], dy[order], raw[order]
    uniq, first, per = np.unique(pix, return_index=True, return_counts=True)
    seg = np.repeat(np.arange(len(uniq)), per)

    alpha = np.minimum(raw, ALPHA_MAX)
    log_keep = np.log1p(-alpha)
    trans = np.exp(_segment_cumsum(log_keep, first, seg) - log_keep)
    used = trans >= T_MIN
    if not used.all():
        # transmittance only falls along a segment, so each pixel keeps a prefix
        g, dx, dy, raw, alpha, trans, seg = (v[used] for v in (g, dx, dy, raw, alpha, trans, seg))
        per = np.bincount(seg, minlength=len(uniq))
        first = np.cumsum(per) - per
    weight = alpha * trans
    t_final = np.ones(len(uniq))
    if len(uniq):
        last = first + per - 1
        t_final = trans[last] * (1.0 - alpha[last])
    return RasterPairs(width, height, uniq, first, seg, g, dx, dy, raw, alpha, trans, weight, t_final)


def _raster_op(proj: Projection, width: int, height: int,
               background: np.ndarray) -> tuple[Tensor, RasterPairs]:
    means, cov = proj.means2d.values, proj.cov2d.values
    opac, cols = proj.opacity.values, proj.colors.values
    pairs = _build_pairs(means, cov, opac, width, height)
    image = np.tile(background, (height * width, 1)).astype(float)
    m, q = len(means), len(pairs.pixel)
    seg, gid = pairs.seg, pairs.gid
    if q:
        contrib = pairs.weight[:, None] * cols[gid]
        acc = np.stack([np.bincount(seg, contrib[:, ch], minlength=q) for ch in range(3)], axis=1)
        image[pairs.pixel] = acc + pairs.t_final[:, None] * background
    image = image.reshape(height, width, 3)

    def fn(g_img: np.ndarray):
        gm, gcov = np.zeros((m, 2)), np.zeros((m, 3))
        gop, gcol = np.zeros(m), np.zeros((m, 3))
        if not q:
            return gm, gcov, gop, gcol
        gq = g_img.reshape(-1, 3)[pairs.pixel]
        ge = gq[seg]  # per-entry pixel gradient
        for ch in range(3):
            gcol[:, ch] = np.bincount(gid, pairs.weight * ge[:, ch], minlength=m)
        gw = np.einsum("nc,nc->n", ge, cols[gid])
        gt_final = gq @ background
        gww = gw * pairs.weight
        # sum over later entries of the same pixel of gw * w
        seg_total = np.bincount(seg, gww, minlength=q)
        later = seg_total[seg] - _segment_cumsum(gww, pairs.first, seg)
        g_alpha = gw * pairs.trans - (later + (gt_final * pairs.t_final)[seg]) / (1.0 - pairs.alpha)
        g_alpha = np.where(pairs.raw_alpha < ALPHA_MAX, g_alpha, 0.0)

        gexp = pairs.raw_alpha / opac[gid]  # the Gaussian falloff itself
        gop = np.bincount(gid, g_alpha * gexp, minlength=m)
        gp = g_alpha * pairs.raw_alpha
        dx, dy = pairs.dx, pairs.dy
        ca, cb, cc = _conic(cov)
        g_ca = np.bincount(gid, -0.5 * dx * dx * gp, minlength=m)
        g_cb = np.bincount(gid, -dx * dy * gp, minlength=m)
        g_cc = np.bincount(gid, -0.5 * dy * dy * gp, minlength=m)
        gm[:, 0] = np.bincount(gid, gp * (ca[gid] * dx + cb[gid] * dy), minlength=m)
        gm[:, 1] = np.bincount(gid, gp * (cb[gid] * dx + cc[gid] * dy), minlength=m)
        # d(inverse)/d(cov): -K G K with the packed off-diagonal counted twice
        kmat = np.stack([np.stack([ca, cb], -1), np.stack([cb, cc], -1)], -2)
        gk = np.stack([np.stack([g_ca, 0.5 * g_cb], -1), np.stack([0.5 * g_cb, g_cc], -1)], -2)
        gs = -kmat @ gk @ kmat
        gcov = np.stack([gs[:, 0, 0], 2.0 * gs[:, 0, 1], gs[:, 1, 1]], axis=1)
        return gm, gcov, gop, gcol

    out = ad.make_op("rasterize", image, (proj.means2d, proj.cov2d, proj.opacity, proj.colors), fn)
    return out, pairs


def _depth_stats(pairs: RasterPairs, inv_depth: np.ndarray, sigma_min: float) -> DepthStats:
    mean = np.zeros(pairs.height * pairs.width)
    std = np.full(pairs.height * pairs.width, sigma_min)
    q = len(pairs.pixel)
    if q:
        idp = inv_depth[pairs.gid]
        wsum = np.bincount(pairs.seg, pairs.weight, minlength=q)
        ok = wsum > 0
        safe = np.where(ok, wsum, 1.0)
        mu = np.bincount(pairs.seg, pairs.weight * idp, minlength=q) / safe
        var = np.bincount(pairs.seg, pairs.weight * (idp - mu[pairs.seg]) ** 2, minlength=q) / safe
        mean[pairs.pixel[ok]] = mu[ok]
        std[pairs.pixel[ok]] = np.maximum(sigma_min, np.sqrt(var[ok]))
    shape = (pairs.height, pairs.width)
    return DepthStats(mean.reshape(shape), std.reshape(shape))


@dataclass
class RenderResult:
    image: Tensor
    depth: DepthStats
    projection: Projection
    pairs: RasterPairs


def render(cloud: GaussianCloud, view: CameraView, background=(0.0, 0.0, 0.0),
           sigma_min: float = SIGMA_MIN) -> RenderResult:
    """Alpha-blended splat render plus per-pixel inverse-depth statistics."""
    bg = np.asarray(background, dtype=float)
    proj = project_gaussians(cloud, view)
    image, pairs = _raster_op(proj, view.width, view.height, bg)
    return RenderResult(image, _depth_stats(pairs, proj.inv_depth, sigma_min), proj, pairs)


def inverse_depth_weight(inv_depth, mean, std) -> np.ndarray:
    return np.exp(-((inv_depth - mean) ** 2) / (2.0 * std**2))


def render_depth_regularized(cloud: GaussianCloud, view: CameraView, stats: DepthStats | None = None,
                             background=(0.0, 0.0, 0.0), sigma_min: float = SIGMA_MIN,
                             modified_transmittance: bool = False) -> np.ndarray:
    """Render with each contribution scaled by its inverse-depth Gaussian weight.

    By default transmittance uses the unmodified alphas, so down-weighted
    contributions simply vanish. With ``modified_transmittance`` the product
    uses alpha * G_inv instead; the light they no longer absorb then reaches
    the Gaussians behind them and the background, keeping each pixel a convex
    combination of colors and background. Uncovered pixels keep the
    background. Returns a plain array: this image only feeds the camera fit.
    """
    bg = np.asarray(background, dtype=float)
    with ad.no_grad():
        proj = project_gaussians(cloud, view)
        _, pairs = _raster_op(proj, view.width, view.height, bg)
    if stats is None:
        stats = _depth_stats(pairs, proj.inv_depth, sigma_min)
    image = np.tile(bg, (view.height * view.width, 1))
    q = len(pairs.pixel)
    if q:
        seg = pairs.seg
        mu = stats.mean.reshape(-1)[pairs.pixel][seg]
        sd = stats.std.reshape(-1)[pairs.pixel][seg]
        ginv = inverse_depth_weight(proj.inv_depth[pairs.gid], mu, sd)
        ginv = np.where(mu > 0, ginv, 1.0)
        if modified_transmittance:
            alpha = pairs.alpha * ginv
            log_keep = np.log1p(-alpha)
            weight = alpha * np.exp(_segment_cumsum(log_keep, pairs.first, seg) - log_keep)
            t_final = np.exp(np.bincount(seg, log_keep, minlength=q))
        else:
            weight, t_final = pairs.weight * ginv, pairs.t_final
        contrib = weight[:, None] * proj.colors.values[pairs.gid]
        acc = np.stack([np.bincount(seg, contrib[:, ch], minlength=q) for ch in range(3)], axis=1)
        image[pairs.pixel] = acc + t_final[:, None] * bg
    return image.reshape(view.height, view.width, 3)
