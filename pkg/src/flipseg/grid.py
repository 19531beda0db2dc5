"""Grayscale grids, boxes, masks, resampling, file formats and the synthetic nodule generator.

Images are plain numpy arrays (2-D or 3-D, row-major) holding intensities in
[0, 255].  Masks are boolean arrays of the same shape.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import BoundsError, ConfigError, FormatError

TARGET_SIDE = 100


# --------------------------------------------------------------------------- boxes

@dataclass(frozen=True)
class BoundingBox:
    origin: tuple[int, ...]
    extent: tuple[int, ...]

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        extent = tuple(int(v) for v in self.extent)
        if len(origin) != len(extent) or len(origin) not in (2, 3):
            raise ConfigError(f"box needs 2 or 3 axes, got origin={origin} extent={extent}")
        if any(o < 0 for o in origin):
            raise BoundsError(f"negative box origin {origin}")
        if any(e < 1 for e in extent):
            raise BoundsError(f"empty box extent {extent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)

    @property
    def ndim(self) -> int:
        return len(self.origin)

    @property
    def stop(self) -> tuple[int, ...]:
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    @property
    def size(self) -> int:
        return int(np.prod(self.extent))

    @property
    def center(self) -> np.ndarray:
        return np.array([o + (e - 1) / 2.0 for o, e in zip(self.origin, self.extent)])

    def fits(self, dims: Sequence[int]) -> bool:
        return len(dims) == self.ndim and all(s <= d for s, d in zip(self.stop, dims))

    def check(self, dims: Sequence[int]) -> None:
        if not self.fits(dims):
            raise BoundsError(f"box {self} does not fit inside image of dims {tuple(dims)}")

    def overlap(self, other: "BoundingBox") -> int:
        lo = np.maximum(self.origin, other.origin)
        hi = np.minimum(self.stop, other.stop)
        return int(np.prod(np.clip(hi - lo, 0, None)))

    def dilate(self, fraction: float, dims: Sequence[int]) -> "BoundingBox":
        """Grow every side by ``fraction`` of the extent along that axis, clamped to the image."""
        pad = [int(round(fraction * e)) for e in self.extent]
        lo = [max(0, o - p) for o, p in zip(self.origin, pad)]
        hi = [min(d, s + p) for s, p, d in zip(self.stop, pad, dims)]
        return BoundingBox(tuple(lo), tuple(h - l for h, l in zip(hi, lo)))

    def __str__(self):
        return " ".join(str(v) for v in self.origin + self.extent)


def tight_box(mask: np.ndarray) -> BoundingBox:
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        raise BoundsError("tight box of an empty mask")
    lo = [int(i.min()) for i in idx]
    hi = [int(i.max()) for i in idx]
    return BoundingBox(tuple(lo), tuple(h - l + 1 for h, l in zip(hi, lo)))


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    box.check(image.shape)
    return image[box.slices].copy()


def embed(patch: np.ndarray, box: BoundingBox, dims: Sequence[int], fill=0) -> np.ndarray:
    """Place ``patch`` at ``box`` inside a fresh grid of ``dims`` (inverse of :func:`crop`)."""
    box.check(dims)
    if tuple(patch.shape) != box.extent:
        raise BoundsError(f"patch shape {patch.shape} differs from box extent {box.extent}")
    out = np.full(tuple(dims), fill, dtype=patch.dtype)
    out[box.slices] = patch
    return out


# --------------------------------------------------------------------------- resampling

@lru_cache(maxsize=256)
def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel aligned, edge clamped (same grid convention as OpenCV INTER_LINEAR)
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    w.flags.writeable = False
    return w


def resize_linear(image: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Bilinear (2-D) or trilinear (3-D) resampling to ``dims``; separable, one axis at a time."""
    out = np.asarray(image, dtype=np.float64)
    for axis, n_out in enumerate(dims):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        w = _linear_weights(n_in, int(n_out))
        out = np.moveaxis(np.tensordot(w, out, axes=([1], [axis])), 0, axis)
    return out


def resize_nearest(grid: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    out = grid
    for axis, n_out in enumerate(dims):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        idx = np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


def normalized_dims(dims: Sequence[int], target: int = TARGET_SIDE) -> tuple[int, ...]:
    scale = target / min(dims)
    return tuple(target if d == min(dims) else max(1, int(round(d * scale))) for d in dims)


def resize_shortest_side(image: np.ndarray, target: int = TARGET_SIDE) -> np.ndarray:
    """Rescale so the shortest axis is exactly ``target`` cells, keeping the aspect ratio.

    The scale factor is ``target / min(image.shape)``; masks are mapped back with
    :func:`resize_nearest`.
    """
    if min(image.shape) < 1:
        raise ConfigError(f"cannot resize grid with dims {image.shape}")
    return resize_linear(image, normalized_dims(image.shape, target))


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255)


def normalize_region(image: np.ndarray, box: BoundingBox, target: int = TARGET_SIDE) -> np.ndarray:
    """Crop ``box`` and rescale it to the standard environment size, re-quantized to 8-bit levels."""
    return quantize(resize_shortest_side(crop(image, box), target))


# --------------------------------------------------------------------------- file I/O

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return buf[start:pos], pos


def _parse_int(tok: bytes, offset: int) -> int:
    try:
        return int(tok.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"expected an integer, found {tok!r}", offset) from None


def decode_image(buf: bytes) -> np.ndarray:
    if buf.startswith(b"P5"):
        pos = 2
        values = []
        for _ in range(3):
            start = pos
            tok, pos = _read_token(buf, pos)
            values.append((_parse_int(tok, start), start))
        (width, _), (height, _), (maxval, mpos) = values
        if maxval != 255:
            raise FormatError(f"PGM maxval must be 255, got {maxval}", mpos)
        if width < 1 or height < 1:
            raise FormatError(f"PGM dims must be positive, got {width}x{height}", 2)
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise FormatError("missing whitespace after PGM header", pos)
        pos += 1
        dims = (height, width)
    elif buf.startswith(b"FLV1"):
        end = buf.find(b"\n")
        if end < 0:
            raise FormatError("unterminated FLV1 header", len(buf))
        parts = buf[:end].split(b" ")
        if len(parts) != 4 or parts[0] != b"FLV1":
            raise FormatError("FLV1 header must be 'FLV1 <dx> <dy> <dz>'", 0)
        dims = tuple(_parse_int(p, 0) for p in parts[1:])
        if any(d < 1 for d in dims):
            raise FormatError(f"FLV1 dims must be positive, got {dims}", 0)
        pos = end + 1
    else:
        raise FormatError("unknown magic (expected P5 or FLV1)", 0)
    need = int(np.prod(dims))
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {len(payload)}",
                          pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.float64)


def encode_image(image: np.ndarray) -> bytes:
    data = quantize(np.asarray(image, dtype=np.float64)).astype(np.uint8)
    if data.ndim == 2:
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    elif data.ndim == 3:
        header = "FLV1 {} {} {}\n".format(*data.shape).encode("ascii")
    else:
        raise ConfigError(f"only 2-D and 3-D grids can be written, got {data.ndim}-D")
    return header + np.ascontiguousarray(data).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_image(buf)
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}") from None


def write_image(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(image))


def read_mask(path) -> np.ndarray:
    return read_image(path) > 127


def write_mask(path, mask: np.ndarray) -> None:
    write_image(path, np.where(mask, 255.0, 0.0))


def read_box(path) -> BoundingBox:
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) not in (4, 6):
        raise FormatError(f"{os.fspath(path)}: expected 4 or 6 integers, found {len(tokens)}")
    try:
        values = [int(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{os.fspath(path)}: non-integer box entry") from None
    d = len(values) // 2
    return BoundingBox(tuple(values[:d]), tuple(values[d:]))


def write_box(path, box: BoundingBox) -> None:
    with open(path, "w") as fh:
        fh.write(str(box) + "\n")


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the speckled-nodule generator.

    ``hypoechoic`` puts the darker of the two mean ranges inside the nodule.
    ``speckle`` scales a multiplicative Rayleigh field (0 gives noise-free means).
    """
    dims: tuple[int, ...] = (160, 160)
    nodule_count: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (14.0, 28.0)
    fg_mean: tuple[float, float] = (40.0, 70.0)
    bg_mean: tuple[float, float] = (115.0, 150.0)
    mean_margin: float = 30.0
    speckle: float = 0.6
    texture: float = 0.08
    irregularity: float = 0.25
    hypoechoic: bool = True
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) not in (2, 3) or min(self.dims) < 8:
            raise ConfigError(f"synthetic dims must be 2 or 3 axes of >= 8 cells, got {self.dims}")
        if tuple(self.nodule_count) != (1, 1):
            raise ConfigError("the generator emits exactly one nodule per image")
        lo, hi = self.radius
        if not 2 <= lo <= hi:
            raise ConfigError(f"bad radius range {self.radius}")
        reach = hi * (1 + self.irregularity) + 2
        if 2 * reach > min(self.dims):
            raise ConfigError(f"nodule radius {hi} (irregularity {self.irregularity}) "
                              f"cannot fit inside {self.dims}")
        for name in ("fg_mean", "bg_mean"):
            a, b = getattr(self, name)
            if not 0 <= a <= b <= 255:
                raise ConfigError(f"{name} range {(a, b)} outside [0, 255]")
        (fa, fb), (ba, bb) = self.fg_mean, self.bg_mean
        gap = max(ba - fb, fa - bb)
        if gap < self.mean_margin:
            raise ConfigError(f"fg/bg mean ranges must be separated by {self.mean_margin}, gap is {gap}")
        if self.speckle < 0 or self.texture < 0 or self.irregularity < 0:
            raise ConfigError("noise strengths must be non-negative")


def _smooth_field(rng, dims, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def generate_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, BoundingBox]:
    """One speckled image with a single irregular nodule, its mask and tight box."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = tuple(spec.dims)
    coords = np.indices(dims, dtype=np.float64)
    for _ in range(100):
        radius = rng.uniform(*spec.radius)
        reach = radius * (1 + spec.irregularity) + 1
        center = np.array([rng.uniform(reach, d - 1 - reach) for d in dims])
        dist = np.sqrt(sum((c - x) ** 2 for c, x in zip(coords, center))) / radius
        wobble = _smooth_field(rng, dims, sigma=radius / 3)
        mask = dist + spec.irregularity * wobble * 0.5 < 1.0
        labels, n = ndimage.label(mask)
        if n == 0:
            continue
        if n > 1:
            sizes = np.bincount(labels.ravel())[1:]
            mask = labels == (np.argmax(sizes) + 1)
        mask = ndimage.binary_fill_holes(mask)
        box = tight_box(mask)
        frac = mask.sum() / box.size
        if min(box.extent) >= 4 and 0.10 <= frac <= 0.95:
            break
    else:
        raise ConfigError("could not place a nodule satisfying the area constraints")

    fg, bg = rng.uniform(*spec.fg_mean), rng.uniform(*spec.bg_mean)
    if not spec.hypoechoic:
        fg, bg = bg, fg
    tissue = bg * (1 + spec.texture * _smooth_field(rng, dims, sigma=6.0))
    mean = np.where(mask, fg, tissue)
    if spec.speckle > 0:
        rayleigh = rng.rayleigh(scale=1.0, size=dims) / np.sqrt(np.pi / 2)
        rayleigh = ndimage.gaussian_filter(rayleigh, 0.7)
        mean = mean * (1 + spec.speckle * (rayleigh / rayleigh.mean() - 1))
    return quantize(mean), mask, box
