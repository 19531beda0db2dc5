"""SLIC superpixels/supervoxels over a normalized box, with inner-to-outer scheduling."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError


@dataclass
class SuperRegionMap:
    labels: np.ndarray          # int32, same shape as the image, dense ids 0..R-1
    sizes: np.ndarray           # (R,) cell counts
    centroids: np.ndarray       # (R, ndim) float coordinates
    means: np.ndarray           # (R,) mean intensity
    n_segment_requested: int
    rank: np.ndarray | None = None    # traversal rank of each region
    order: np.ndarray | None = None   # region ids by ascending rank
    _cells: list | None = field(default=None, repr=False)

    @property
    def n_regions(self) -> int:
        return len(self.sizes)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.labels.shape

    def cells(self, region: int) -> np.ndarray:
        """Flat (row-major) indices of the cells in ``region``."""
        if self._cells is None:
            flat = self.labels.ravel()
            order = np.argsort(flat, kind="stable")
            bounds = np.cumsum(self.sizes)[:-1]
            self._cells = np.split(order, bounds)
        return self._cells[region]


def _grid_counts(dims, n_segment):
    step = (np.prod(dims) / n_segment) ** (1.0 / len(dims))
    counts = [max(1, min(d, int(round(d / step)))) for d in dims]
    return counts, step


def slic(image: np.ndarray, n_segment: int, compactness: float = 10.0, max_iters: int = 10,
         min_fraction: float = 0.25) -> SuperRegionMap:
    """k-means over (intensity, scaled position), seeded on a regular grid.

    Each cell only competes among the 3**ndim cluster seeds around its own grid
    tile.  Afterwards every disconnected fragment smaller than ``min_fraction`` of
    the mean region size is merged into its largest adjacent region.
    """
    image = np.asarray(image, dtype=np.float64)
    dims = image.shape
    n_cells = image.size
    if not 1 <= n_segment <= n_cells:
        raise ConfigError(f"n_segment must be in [1, {n_cells}], got {n_segment}")
    if compactness <= 0:
        raise ConfigError("compactness must be positive")
    ndim = image.ndim

    counts, step = _grid_counts(dims, n_segment)
    counts_arr = np.array(counts)
    coords = np.indices(dims, dtype=np.float64).reshape(ndim, -1)
    flat = image.ravel()
    # tile index of each cell along each axis
    tile = np.stack([np.minimum((coords[a] * counts[a] / dims[a]).astype(int), counts[a] - 1)
                     for a in range(ndim)])
    seed_grid = np.stack(np.meshgrid(*[(np.arange(c) + 0.5) * d / c - 0.5
                                       for c, d in zip(counts, dims)], indexing="ij"))
    centers = seed_grid.reshape(ndim, -1).T.copy()
    n_clusters = centers.shape[0]
    cell_tile = np.ravel_multi_index(tuple(tile), counts)
    c_int = flat[cell_tile].astype(np.float64)
    # seed intensity = mean of the tile, more stable than a single speckled cell
    c_int = np.bincount(cell_tile, weights=flat, minlength=n_clusters) / \
        np.maximum(np.bincount(cell_tile, minlength=n_clusters), 1)
    spatial_w = (compactness / step) ** 2

    offsets = list(itertools.product((-1, 0, 1), repeat=ndim))
    labels = cell_tile.copy()
    for _ in range(max_iters):
        best = np.full(n_cells, np.inf)
        for off in offsets:
            nb = tile + np.array(off)[:, None]
            valid = np.all((nb >= 0) & (nb < counts_arr[:, None]), axis=0)
            if not valid.any():
                continue
            cand = np.ravel_multi_index(tuple(np.clip(nb, 0, counts_arr[:, None] - 1)), counts)
            d = (flat - c_int[cand]) ** 2
            d += spatial_w * ((coords - centers[cand].T) ** 2).sum(axis=0)
            d[~valid] = np.inf
            better = d < best
            best[better] = d[better]
            labels[better] = cand[better]
        sizes = np.bincount(labels, minlength=n_clusters)
        nz = sizes > 0
        new_int = np.bincount(labels, weights=flat, minlength=n_clusters)
        c_int[nz] = new_int[nz] / sizes[nz]
        for a in range(ndim):
            s = np.bincount(labels, weights=coords[a], minlength=n_clusters)
            centers[nz, a] = s[nz] / sizes[nz]

    labels = _enforce_connectivity(labels.reshape(dims), min_fraction)
    return _build_map(labels, image, n_segment)


def _enforce_connectivity(labels: np.ndarray, min_fraction: float) -> np.ndarray:
    ndim = labels.ndim
    structure = ndimage.generate_binary_structure(ndim, 1)
    comp = np.full(labels.shape, -1, dtype=np.int64)
    n_comp = 0
    objects = ndimage.find_objects(labels + 1)
    for lab, sl in enumerate(objects):
        if sl is None:
            continue
        sub = labels[sl] == lab
        cl, n = ndimage.label(sub, structure=structure)
        view = comp[sl]
        view[sub] = cl[sub] - 1 + n_comp
        n_comp += n
    sizes = np.bincount(comp.ravel(), minlength=n_comp).astype(np.int64)
    threshold = min_fraction * labels.size / max(1, len(objects) - objects.count(None))

    # face-adjacent component pairs
    pairs = []
    for axis in range(ndim):
        a = np.moveaxis(comp, axis, 0)
        left, right = a[:-1].ravel(), a[1:].ravel()
        diff = left != right
        pairs.append(np.stack([left[diff], right[diff]], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    neighbours = [set() for _ in range(n_comp)]
    for u, v in pairs:
        neighbours[u].add(v)
        neighbours[v].add(u)

    parent = np.arange(n_comp)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    group_size = sizes.copy()
    group_nb = {i: set(neighbours[i]) for i in range(n_comp)}
    for c in sorted(range(n_comp), key=lambda i: (sizes[i], i)):
        if sizes[c] >= threshold:
            break
        r = find(c)
        if group_size[r] >= threshold:
            continue
        cands = {find(n) for n in group_nb[r]} - {r}
        if not cands:
            continue
        target = max(cands, key=lambda g: (group_size[g], -g))
        parent[r] = target
        group_size[target] += group_size[r]
        group_nb[target] |= group_nb[r]
        del group_nb[r]
    roots = np.array([find(i) for i in range(n_comp)])
    merged = roots[comp]
    # dense ids in raster order of first appearance
    _, first = np.unique(merged.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(merged.max() + 1, dtype=np.int32)
    remap[np.unique(merged.ravel())[order]] = np.arange(len(order), dtype=np.int32)
    return remap[merged]


def _build_map(labels: np.ndarray, image: np.ndarray, n_segment: int) -> SuperRegionMap:
    flat = labels.ravel()
    r = int(flat.max()) + 1
    sizes = np.bincount(flat, minlength=r)
    coords = np.indices(labels.shape, dtype=np.float64).reshape(labels.ndim, -1)
    centroids = np.stack([np.bincount(flat, weights=c, minlength=r) / sizes for c in coords], axis=1)
    means = np.bincount(flat, weights=image.ravel(), minlength=r) / sizes
    return SuperRegionMap(labels=labels.astype(np.int32), sizes=sizes, centroids=centroids,
                          means=means, n_segment_requested=n_segment)


def traversal_order(smap: SuperRegionMap, box_center) -> np.ndarray:
    """Region ids ordered inner-to-outer: by centroid distance to ``box_center``, ties by id.

    The ranks are written back into ``smap``.
    """
    dist = np.sqrt(((smap.centroids - np.asarray(box_center, dtype=np.float64)) ** 2).sum(axis=1))
    ids = np.arange(smap.n_regions)
    order = np.lexsort((ids, dist))
    rank = np.empty_like(order)
    rank[order] = ids
    smap.order, smap.rank = order, rank
    return order


def partition_among_agents(smap: SuperRegionMap, k: int) -> list[np.ndarray]:
    """Split regions into ``k`` slabs along the longest axis, balanced in region count.

    Slabs are cut by centroid coordinate; the boundary regions are then shifted
    between neighbouring slabs so that counts differ by at most one.  Each list
    is returned in traversal order when ranks are available.
    """
    r = smap.n_regions
    if not 1 <= k <= r:
        raise ConfigError(f"agent count must be in [1, {r}], got {k}")
    axis = int(np.argmax(smap.dims))
    along = smap.centroids[:, axis]
    ids = np.arange(r)
    by_coord = np.lexsort((ids, along))
    base, extra = divmod(r, k)
    sizes = [base + (1 if i < extra else 0) for i in range(k)]
    parts = np.split(by_coord, np.cumsum(sizes)[:-1])
    key = smap.rank if smap.rank is not None else ids
    return [p[np.argsort(key[p], kind="stable")] for p in parts]


def region_fill(image: np.ndarray, smap: SuperRegionMap, region: int, source: np.ndarray) -> np.ndarray:
    if image.shape != source.shape or image.shape != smap.dims:
        raise DataError(f"fill needs matching dims: image {image.shape}, source {source.shape}, "
                        f"map {smap.dims}")
    out = image.copy()
    cells = smap.cells(region)
    out.flat[cells] = source.flat[cells]
    return out


def check_connected(smap: SuperRegionMap) -> bool:
    structure = ndimage.generate_binary_structure(smap.labels.ndim, 1)
    for lab, sl in enumerate(ndimage.find_objects(smap.labels + 1)):
        if sl is None:
            return False
        _, n = ndimage.label(smap.labels[sl] == lab, structure=structure)
        if n != 1:
            return False
    return True
