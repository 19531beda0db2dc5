"""Wasserstein distance on intensity samples and segmentation quality metrics."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DataError


def wasserstein_1d(a, b) -> float:
    """W1 between the empirical distributions of two samples.

    Integrates |F_a^-1(u) - F_b^-1(u)| over u in [0, 1]; both quantile functions
    are step functions, so the integral is evaluated exactly on the merged
    breakpoints {i/n} U {j/m}.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise DataError("Wasserstein distance of an empty sample")
    if n == m:
        return float(np.abs(a - b).mean())
    # integer arithmetic on the common denominator n*m keeps breakpoints exact
    cuts = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(cuts, prepend=0)
    starts = cuts - widths
    ia = starts // m
    ib = starts // n
    return float((np.abs(a[ia] - b[ib]) * widths).sum() / (n * m))


def wasserstein_hist(ha: np.ndarray, hb: np.ndarray) -> float:
    """W1 between two histograms over unit-spaced integer intensity bins."""
    na, nb = ha.sum(), hb.sum()
    if na == 0 or nb == 0:
        raise DataError("Wasserstein distance of an empty sample")
    return float(np.abs(np.cumsum(ha) / na - np.cumsum(hb) / nb)[:-1].sum())


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DataError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / total


def jaccard(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return np.logical_and(pred, gt).sum() / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground cells with at least one background face-neighbour (outside counts as background)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return ndimage.distance_transform_edt(~dst)[src]


def surface_distances(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        raise DataError("surface distance is undefined for an empty mask")
    bp, bg = boundary(pred), boundary(gt)
    return _directed(bp, bg), _directed(bg, bp)


def hausdorff(pred, gt) -> float:
    d_pg, d_gp = surface_distances(pred, gt)
    return float(max(d_pg.max(), d_gp.max()))


def asd(pred, gt) -> float:
    d_pg, d_gp = surface_distances(pred, gt)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def segmentation_scores(pred, gt) -> dict[str, float]:
    """DICE and JAC as percentages, HD and ASD in cells. Surface metrics are NaN for an empty mask."""
    scores = {"dice": 100.0 * dice(pred, gt), "jac": 100.0 * jaccard(pred, gt)}
    try:
        d_pg, d_gp = surface_distances(pred, gt)
        scores["hd"] = float(max(d_pg.max(), d_gp.max()))
        scores["asd"] = float((d_pg.mean() + d_gp.mean()) / 2.0)
    except DataError:
        scores["hd"] = scores["asd"] = float("nan")
    return scores
