"""Image quality and distortion-recovery metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from camsplat import autodiff as ad
from camsplat.optimize.losses import ssim as _ssim


class _Infinite:
    """PSNR of identical images. Deliberately not a float."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INFINITE"

    def __reduce__(self):
        return (_Infinite, ())


INFINITE = _Infinite()


def psnr(a, b, peak: float = 1.0):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INFINITE
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b) -> float:
    with ad.no_grad():
        return float(_ssim(np.asarray(a, float), np.asarray(b, float)).values)


def mean_psnr(values):
    if any(v is INFINITE for v in values):
        return INFINITE
    return float(np.mean(values)) if values else float("nan")


def attenuation_error(recovered, gt) -> float:
    """MAE after the least-squares global scale s* = <rec, gt> / <rec, rec>."""
    rec, gt = np.asarray(recovered, float), np.asarray(gt, float)
    if rec.shape != gt.shape:
        raise ValueError(f"attenuation_error: shape mismatch {rec.shape} vs {gt.shape}")
    rr = float(np.sum(rec * rec))
    if rr == 0.0:
        raise ValueError("attenuation_error: recovered map is identically zero")
    s = float(np.sum(rec * gt)) / rr
    return float(np.mean(np.abs(s * rec - gt)))


def emission_localization(gamma, centers_px) -> float:
    """Mean distance from each blob center to the nearest qualifying local maximum.

    Maxima of the channel-mean map count when they exceed half its peak; a
    blob with none in reach costs the image diagonal.
    """
    g = np.asarray(gamma, float)
    if g.ndim == 3:
        g = g.mean(axis=2)
    h, w = g.shape
    diag = math.hypot(w, h)
    peak = float(g.max())
    if peak > 0:
        is_max = (g == maximum_filter(g, size=3, mode="nearest")) & (g > 0.5 * peak)
        ys, xs = np.nonzero(is_max)
    else:
        ys = xs = np.zeros(0)
    dists = []
    for cx, cy in centers_px:
        if len(xs) == 0:
            dists.append(diag)
        else:
            dists.append(float(np.min(np.hypot(xs - cx, ys - cy))))
    return float(np.mean(dists))


def _encode(v):
    return "inf" if v is INFINITE else v


def _decode(v):
    return INFINITE if v == "inf" else v


@dataclass
class EvalReport:
    distorted_psnr: list = field(default_factory=list)   # train views, with camera, vs inputs
    distorted_ssim: list = field(default_factory=list)
    clean_psnr: list = field(default_factory=list)       # held-out views, scene only, vs clean
    clean_ssim: list = field(default_factory=list)
    attenuation_mae: float | None = None
    emission_localization_px: float | None = None

    @property
    def mean_distorted_psnr(self):
        return mean_psnr(self.distorted_psnr)

    @property
    def mean_clean_psnr(self):
        return mean_psnr(self.clean_psnr)

    @property
    def mean_distorted_ssim(self) -> float:
        return float(np.mean(self.distorted_ssim)) if self.distorted_ssim else float("nan")

    @property
    def mean_clean_ssim(self) -> float:
        return float(np.mean(self.clean_ssim)) if self.clean_ssim else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distorted_psnr"] = [_encode(v) for v in self.distorted_psnr]
        d["clean_psnr"] = [_encode(v) for v in self.clean_psnr]
        d["mean"] = {
            "distorted_psnr": _encode(self.mean_distorted_psnr) if self.distorted_psnr else None,
            "distorted_ssim": self.mean_distorted_ssim if self.distorted_ssim else None,
            "clean_psnr": _encode(self.mean_clean_psnr) if self.clean_psnr else None,
            "clean_ssim": self.mean_clean_ssim if self.clean_ssim else None,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d.pop("mean", None)
        d["distorted_psnr"] = [_decode(v) for v in d["distorted_psnr"]]
        d["clean_psnr"] = [_decode(v) for v in d["clean_psnr"]]
        return cls(**d)
