"""Depth and image metrics, the Artifact Score, and the training losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from skimage.feature import canny

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_INF = math.inf


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    delta1: float = math.nan
    delta2: float = math.nan
    delta3: float = math.nan
    abs_rel: float = math.nan
    rmse: float = math.nan
    psnr: float = math.nan
    ssim: float = math.nan
    artifact_score: float = math.nan
    valid_pixel_count: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        d = (self.delta1, self.delta2, self.delta3)
        if not any(math.isnan(x) for x in d) and not d[0] <= d[1] <= d[2]:
            raise MetricError("delta thresholds must be monotone")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and math.isinf(v):
                out[k] = "inf"
            elif isinstance(v, float) and math.isnan(v):
                out[k] = None
        return out


# ---------------------------------------------------------------------------
# depth


def _valid(pred, gt, valid_mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not mask.any():
        raise MetricError("empty valid mask")
    p, g = pred[mask], gt[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise MetricError("depths must be positive on valid pixels")
    return p, g


def depth_metrics(pred, gt, valid_mask=None) -> dict:
    p, g = _valid(pred, gt, valid_mask)
    ratio = np.maximum(p / g, g / p)
    out = {f"delta{t}": float(np.mean(ratio < 1.25**t)) for t in (1, 2, 3)}
    out["abs_rel"] = float(np.mean(np.abs(p - g) / g))
    out["rmse"] = float(np.sqrt(np.mean((p - g) ** 2)))
    out["valid_pixel_count"] = int(p.size)
    return out


# ---------------------------------------------------------------------------
# images


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _ssim_channel(x, y, win, c1, c2):
    def filt(a):
        a = ndimage.correlate1d(a, win, axis=0, mode="constant")
        a = ndimage.correlate1d(a, win, axis=1, mode="constant")
        r = len(win) // 2
        return a[r:a.shape[0] - r, r:a.shape[1] - r]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Gaussian-windowed SSIM over valid windows; RGB is the mean over channels."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise MetricError(f"image {x.shape[:2]} smaller than the {window}x{window} window")
    win = _gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if x.ndim == 2:
        return _ssim_channel(x, y, win, c1, c2)
    return float(np.mean([_ssim_channel(x[..., c], y[..., c], win, c1, c2)
                          for c in range(x.shape[2])]))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img[..., :3] @ LUMA


# ---------------------------------------------------------------------------
# artifact score


@dataclass
class SmoothMask:
    mask: np.ndarray
    canny_low: float = 0.1
    canny_high: float = 0.2
    gaussian_sigma: float = 1.4
    dilation_size: int = 5
    dilation_iterations: int = 2

    def params(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "mask"}


def smooth_mask(reference, canny_low=0.1, canny_high=0.2, gaussian_sigma=1.4,
                dilation_size=5, dilation_iterations=2) -> SmoothMask:
    gray = to_gray(reference)
    edges = canny(gray, sigma=gaussian_sigma, low_threshold=canny_low, high_threshold=canny_high)
    if dilation_iterations > 0:
        edges = ndimage.binary_dilation(edges, np.ones((dilation_size, dilation_size), bool),
                                        iterations=dilation_iterations)
    mask = ~edges
    # the Laplacian is undefined on the one-pixel border
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return SmoothMask(mask, canny_low, canny_high, gaussian_sigma, dilation_size,
                      dilation_iterations)


def laplacian_abs(gray) -> np.ndarray:
    g = np.pad(np.asarray(gray, dtype=np.float64), 1)
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return np.abs(lap)


def artifact_score(sim, gt_reference, mask: SmoothMask | None = None, **params):
    """Mean |Laplacian| of the simulated image over smooth regions of the reference.

    Returns ``(score, SmoothMask)``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    ref = np.asarray(gt_reference, dtype=np.float64)
    if sim.shape != ref.shape:
        raise MetricError(f"shape mismatch {sim.shape} vs {ref.shape}")
    if mask is None:
        mask = smooth_mask(ref, **params)
    m = mask.mask
    if not m.any():
        raise MetricError("smooth-region mask is empty")
    lap = laplacian_abs(to_gray(sim))
    return float(lap[m].sum() / m.sum()), mask


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    gamma_cont: float = 1.0
    gamma_msfr: float = 0.1
    gamma_silog: float = 0.1
    silog_lambda: float = 1.0

    def __post_init__(self):
        if min(self.gamma_cont, self.gamma_msfr, self.gamma_silog, self.silog_lambda) < 0:
            raise MetricError("loss weights must be nonnegative")


def _scales(pred_scales, gt_scales):
    if isinstance(pred_scales, np.ndarray):
        pred_scales, gt_scales = [pred_scales], [gt_scales]
    if len(pred_scales) != len(gt_scales):
        raise MetricError("scale lists differ in length")
    pairs = []
    for p, g in zip(pred_scales, gt_scales):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise MetricError(f"scale shape mismatch {p.shape} vs {g.shape}")
        pairs.append((p, g))
    return pairs


def image_pyramid(img, levels: int = 3) -> list[np.ndarray]:
    """Full, 1/2, 1/4 ... scales by 2x2 averaging."""
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        a = out[-1]
        h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
        a = a[:h, :w]
        out.append(0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]))
    return out


def content_loss(pred_scales, gt_scales) -> float:
    return float(sum(np.abs(p - g).sum() / p.size for p, g in _scales(pred_scales, gt_scales)))


def msfr_loss(pred_scales, gt_scales) -> float:
    total = 0.0
    for p, g in _scales(pred_scales, gt_scales):
        d = np.fft.fft2(p, axes=(0, 1)) - np.fft.fft2(g, axes=(0, 1))
        total += (np.abs(d.real).sum() + np.abs(d.imag).sum()) / p.size
    return float(total)


def silog_loss(pred_depth, gt_depth, lam: float = 1.0, valid_mask=None, printed: bool = False) -> float:
    """Scale-invariant log loss with ``g = log d - log d_hat``.

    ``printed=True`` evaluates the variant with an unsquared first term.
    """
    p, g = _valid(pred_depth, gt_depth, valid_mask)
    d = np.log(g) - np.log(p)
    n = d.size
    first = np.sum(d) / n if printed else np.sum(d * d) / n
    return float(first - lam * np.sum(d) ** 2 / n**2)


def total_loss(components=None, weights: LossWeights = LossWeights(), *, pred_image=None,
               gt_image=None, pred_depth=None, gt_depth=None) -> float:
    """Weighted sum of content, MSFR and SiLog terms.

    Pass precomputed ``components=(content, msfr, silog)`` or the images and
    depths to evaluate them here (images are expanded into a 3-level pyramid).
    """
    if components is None:
        ps, gs = image_pyramid(pred_image), image_pyramid(gt_image)
        components = (content_loss(ps, gs), msfr_loss(ps, gs),
                      silog_loss(pred_depth, gt_depth, weights.silog_lambda))
    c, m, s = components
    return float(weights.gamma_cont * c + weights.gamma_msfr * m + weights.gamma_silog * s)
