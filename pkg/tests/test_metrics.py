import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from flipseg.errors import DataError
from flipseg.metrics import asd, boundary, dice, hausdorff, jaccard, segmentation_scores, \
    wasserstein_1d, wasserstein_hist


def lp_w1(a, b):
    """Exact optimal transport between two uniform empirical measures, by linear programming."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(np.asarray(a, float), np.asarray(b, float))).ravel()
    rows = np.zeros((n, n * m))
    cols = np.zeros((m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        cols[j, j::m] = 1
    res = linprog(cost, A_eq=np.vstack([rows, cols]), b_eq=np.r_[np.full(n, 1 / n), np.full(m, 1 / m)],
                  bounds=(0, None), method="highs")
    return res.fun


def brute_surface(pred, gt):
    """O(n^2) reference: boundary cells by explicit neighbour scan, then all pairwise distances."""
    def edge(mask):
        pts = []
        for idx in zip(*np.nonzero(mask)):
            for ax in range(mask.ndim):
                for d in (-1, 1):
                    n = list(idx)
                    n[ax] += d
                    if n[ax] < 0 or n[ax] >= mask.shape[ax] or not mask[tuple(n)]:
                        pts.append(idx)
                        break
                else:
                    continue
                break
        return np.array(pts, float)

    bp, bg = edge(pred), edge(gt)
    dist = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    d_pg, d_gp = dist.min(axis=1), dist.min(axis=0)
    return max(d_pg.max(), d_gp.max()), (d_pg.mean() + d_gp.mean()) / 2


# ---------------------------------------------------------------- Wasserstein

def test_w1_examples():
    assert wasserstein_1d([4, 4, 9], [9, 4, 4]) == 0.0
    assert wasserstein_1d([10, 10, 10], [25, 25, 25]) == 15.0
    assert wasserstein_1d([1, 3], [2, 4]) == pytest.approx(1.0)


def test_w1_matches_lp_on_small_supports():
    rng = np.random.default_rng(0)
    for _ in range(60):
        a = rng.integers(0, 256, rng.integers(1, 9))
        b = rng.integers(0, 256, rng.integers(1, 9))
        assert wasserstein_1d(a, b) == pytest.approx(lp_w1(a, b), rel=1e-9, abs=1e-9)


def test_w1_properties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b, c = (rng.random(rng.integers(1, 30)) * 255 for _ in range(3))
        ab = wasserstein_1d(a, b)
        assert ab == pytest.approx(wasserstein_1d(b, a), abs=1e-12)
        assert ab <= wasserstein_1d(a, c) + wasserstein_1d(c, b) + 1e-9
        shift = rng.uniform(-20, 20)
        assert wasserstein_1d(a + shift, b + shift) == pytest.approx(ab, abs=1e-9)
        assert abs(wasserstein_1d(a + shift, b) - ab) <= abs(shift) + 1e-9
        assert wasserstein_1d(a, a + shift) == pytest.approx(abs(shift), abs=1e-9)


def test_w1_empty_sample():
    with pytest.raises(DataError):
        wasserstein_1d([], [1.0])


def test_histogram_w1_equals_sample_w1():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.integers(0, 256, rng.integers(1, 200))
        b = rng.integers(0, 256, rng.integers(1, 200))
        ha, hb = np.bincount(a, minlength=256), np.bincount(b, minlength=256)
        assert wasserstein_hist(ha, hb) == pytest.approx(wasserstein_1d(a, b), abs=1e-9)


# ---------------------------------------------------------------- overlap

def test_overlap_examples():
    a = np.zeros((20, 20), bool)
    a[2:7, 2:6] = True
    assert dice(a, a) == 1.0 and jaccard(a, a) == 1.0
    b = np.zeros_like(a)
    b[10:15, 10:14] = True
    assert dice(a, b) == 0.0 and jaccard(a, b) == 0.0
    e = np.zeros_like(a)
    assert dice(e, e) == 1.0 and jaccard(e, e) == 1.0


def test_half_overlap_counts():
    a = np.zeros(200, bool)
    b = np.zeros(200, bool)
    a[:100] = True
    b[50:150] = True
    assert dice(a, b) == pytest.approx(0.5)
    assert jaccard(a, b) == pytest.approx(1 / 3)


def test_dice_jaccard_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.random((12, 9)) > 0.6, rng.random((12, 9)) > 0.4
        d, j = dice(a, b), jaccard(a, b)
        assert d >= j
        assert d == pytest.approx(2 * j / (1 + j))


def test_overlap_dim_mismatch():
    with pytest.raises(DataError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


# ---------------------------------------------------------------- surface distances

def test_surface_examples():
    a = np.zeros((8, 8), bool)
    a[2:6, 1:5] = True
    assert hausdorff(a, a) == 0.0 and asd(a, a) == 0.0
    p, q = np.zeros((10, 10), bool), np.zeros((10, 10), bool)
    p[0, 0] = True
    q[3, 4] = True
    assert hausdorff(p, q) == pytest.approx(5.0)
    assert asd(p, q) == pytest.approx(5.0)


def test_boundary_is_face_neighbourhood():
    a = np.zeros((5, 5), bool)
    a[1:4, 1:4] = True
    expected = a.copy()
    expected[2, 2] = False
    assert np.array_equal(boundary(a), expected)
    full = np.ones((3, 3), bool)
    assert boundary(full).sum() == 8   # the image border counts as background


@pytest.mark.parametrize("shape", [(9, 11), (6, 5, 7)])
def test_surface_distances_match_brute_force(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(15):
        a = rng.random(shape) > 0.7
        b = rng.random(shape) > 0.6
        if not a.any() or not b.any():
            continue
        hd, mean = brute_surface(a, b)
        assert hausdorff(a, b) == pytest.approx(hd, abs=1e-12)
        assert asd(a, b) == pytest.approx(mean, abs=1e-12)
        assert hausdorff(a, b) >= asd(a, b) >= 0


def test_surface_distance_undefined_for_empty():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    b[1, 1] = True
    with pytest.raises(DataError):
        hausdorff(a, b)
    scores = segmentation_scores(a, b)
    assert scores["dice"] == 0.0 and np.isnan(scores["hd"]) and np.isnan(scores["asd"])


def test_segmentation_scores_in_percent():
    a = np.zeros((10, 10), bool)
    a[:5] = True
    b = np.zeros((10, 10), bool)
    b[:, :5] = True
    s = segmentation_scores(a, b)
    assert s["dice"] == pytest.approx(50.0)
    assert s["jac"] == pytest.approx(100 / 3)
    assert set(s) == {"dice", "jac", "hd", "asd"}


def test_lp_oracle_sanity():
    # the oracle itself against a hand-solved transport plan
    assert lp_w1([0, 10], [5]) == pytest.approx(5.0)
    assert lp_w1([0, 0, 6], [0, 3]) == pytest.approx(
        sum(abs(x - y) * w for (x, y), w in zip(itertools.product([0, 6], [0, 3]), [1 / 2, 1 / 6, 0, 1 / 3])))
