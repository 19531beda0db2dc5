"""On-disk dataset layout.

::

    root/
      config.ini            resolved generator configuration
      manifest.tsv          one row per case: split, name, seed, image, mask, box
      train/ val/ test/     <name>.pgm|.flv  <name>_mask.pgm|.flv  <name>.box

Images are PGM (2-D) or FLV1 (3-D); masks use the same container with values
0/255; boxes are one ASCII line ``origin ... extent ...`` in image axis order.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import BoundingBox, generate_synthetic, read_box, read_image, read_mask, write_box, \
    write_image, write_mask

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("split", "name", "seed", "image", "mask", "box")


@dataclass
class Case:
    name: str
    image: np.ndarray
    mask: np.ndarray | None
    box: BoundingBox
    split: str = ""


def image_suffix(ndim: int) -> str:
    return ".pgm" if ndim == 2 else ".flv"


def split_sizes(n: int, val_fraction: float, test_fraction: float) -> dict[str, int]:
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"{n} images leave no training split (val {n_val}, test {n_test})")
    return {"train": n_train, "val": n_val, "test": n_test}


def case_seed(base: int, index: int) -> int:
    return int(base) * 1_000_003 + index


def generate_dataset(root, cfg) -> list[dict]:
    """Write a synthetic dataset as described by a :class:`RunConfig`; returns the manifest rows."""
    root = Path(root)
    d = cfg["data"]
    sizes = split_sizes(d["n_images"], d["val_fraction"], d["test_fraction"])
    suffix = image_suffix(len(d["dims"]))
    rows = []
    index = 0
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
        for _ in range(sizes[split]):
            seed = case_seed(d["seed"], index)
            name = f"case{index:04d}"
            image, mask, box = generate_synthetic(cfg.synthetic_spec(seed))
            img_path = root / split / f"{name}{suffix}"
            mask_path = root / split / f"{name}_mask{suffix}"
            box_path = root / split / f"{name}.box"
            write_image(img_path, image)
            write_mask(mask_path, mask)
            write_box(box_path, box)
            rows.append({"split": split, "name": name, "seed": seed,
                         "image": img_path.relative_to(root).as_posix(),
                         "mask": mask_path.relative_to(root).as_posix(),
                         "box": box_path.relative_to(root).as_posix()})
            index += 1
    with open(root / "manifest.tsv", "w") as fh:
        fh.write(f"# generator seed = {d['seed']}\n")
        fh.write("\t".join(MANIFEST_HEADER) + "\n")
        for r in rows:
            fh.write("\t".join(str(r[k]) for k in MANIFEST_HEADER) + "\n")
    cfg.write(root)
    return rows


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.tsv"
    if not path.is_file():
        raise DataError(f"no manifest.tsv in {root}; run gen-data first")
    rows, header = [], None
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if header is None:
            header = fields
            if tuple(header) != MANIFEST_HEADER:
                raise DataError(f"{path}: unexpected header {header}")
            continue
        if len(fields) != len(header):
            raise DataError(f"{path}: malformed row {line!r}")
        rows.append(dict(zip(header, fields)))
    return rows


def load_split(root, split: str) -> list[Case]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    cases = []
    for r in read_manifest(root):
        if r["split"] != split:
            continue
        cases.append(Case(r["name"], read_image(root / r["image"]), read_mask(root / r["mask"]),
                          read_box(root / r["box"]), split))
    if not cases:
        raise DataError(f"split {split!r} in {root} is empty")
    return cases


def load_directory(directory) -> list[Case]:
    """Cases from a bare directory of ``<name>.<pgm|flv>`` + ``<name>.box`` (masks optional)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    cases = []
    for box_path in sorted(directory.glob("*.box")):
        name = box_path.stem
        for suffix in (".pgm", ".flv"):
            img_path = directory / f"{name}{suffix}"
            if img_path.is_file():
                break
        else:
            raise DataError(f"no image for {box_path}")
        mask_path = directory / f"{name}_mask{suffix}"
        mask = read_mask(mask_path) if mask_path.is_file() else None
        cases.append(Case(name, read_image(img_path), mask, read_box(box_path)))
    if not cases:
        raise DataError(f"no <name>.box annotations in {directory}")
    return cases
