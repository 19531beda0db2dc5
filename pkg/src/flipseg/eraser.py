"""Eraser sources: neighbouring patches of the annotation box and their blends."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .grid import BoundingBox, resize_linear

KIND_ORDER = ("up", "down", "left", "right", "forward", "backward", "ud", "lr", "fb")
# (axis, side) for each primary direction; side -1 is before the box, +1 after it
DIRECTIONS = {
    "up": (0, -1), "down": (0, 1),
    "left": (1, -1), "right": (1, 1),
    "forward": (2, -1), "backward": (2, 1),
}
COMBINED = {"ud": ("up", "down"), "lr": ("left", "right"), "fb": ("forward", "backward")}


@dataclass
class EraserCandidate:
    patch: np.ndarray
    kind: str
    score: float | None = None


def extract_basic_patches(image: np.ndarray, box: BoundingBox) -> dict[str, np.ndarray]:
    """Strips adjacent to each face of ``box``, resampled to the box shape when the margin is thin.

    A strip is at most one box extent thick.  Directions with no margin are omitted.
    """
    box.check(image.shape)
    patches = {}
    for kind, (axis, side) in DIRECTIONS.items():
        if axis >= image.ndim:
            continue
        extent = box.extent[axis]
        if side < 0:
            thick = min(extent, box.origin[axis])
            lo = box.origin[axis] - thick
        else:
            thick = min(extent, image.shape[axis] - box.stop[axis])
            lo = box.stop[axis]
        if thick <= 0:
            continue
        sl = list(box.slices)
        sl[axis] = slice(lo, lo + thick)
        strip = image[tuple(sl)].astype(np.float64)
        patches[kind] = strip.copy() if thick == extent else resize_linear(strip, box.extent)
    return patches


def combine_patches(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DataError(f"cannot combine patches of shapes {a.shape} and {b.shape}")
    return 0.5 * (a + b)


def generate_candidates(image: np.ndarray, box: BoundingBox) -> list[EraserCandidate]:
    basic = extract_basic_patches(image, box)
    out = dict(basic)
    for kind, (p, q) in COMBINED.items():
        if p in basic and q in basic:
            out[kind] = combine_patches(basic[p], basic[q])
    return [EraserCandidate(out[k], k) for k in KIND_ORDER if k in out]


def select_source(candidates: list[EraserCandidate], classifier) -> EraserCandidate:
    """Score each candidate's normal-tissue probability; the first highest-scoring one wins."""
    if not candidates:
        raise DataError("no eraser candidates (the box leaves no margin in any direction)")
    probs = classifier.score_batch([c.patch for c in candidates])
    for c, p in zip(candidates, probs):
        c.score = float(p[1])
    best = 0
    for i, c in enumerate(candidates):
        if c.score > candidates[best].score:
            best = i
    return candidates[best]
