"""Nodule / normal-tissue classifier built from box annotations alone."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .grid import TARGET_SIDE, BoundingBox, crop, normalize_region, resize_linear
from .neural import AdamW, Sequential, classifier_net, load_networks, save_networks, \
    softmax, softmax_cross_entropy
from .superpixel import SuperRegionMap

log = logging.getLogger(__name__)

NODULE, NORMAL = 0, 1
TAGS = ("nodule", "normal")


@dataclass
class PseudoSample:
    patch: np.ndarray
    tag: int
    provenance: str            # negative-patch | positive-box | fill-augmented
    ratio: float | None = None


def _sample_size(rng, extent, dims):
    size = []
    for e, d in zip(extent, dims):
        lo = max(1, int(np.ceil(0.5 * e)))
        hi = max(lo, int(np.floor(1.5 * e)))
        size.append(min(d, int(rng.integers(lo, hi + 1))))
    return size


def mine_pseudo_samples(image: np.ndarray, box: BoundingBox, n_pos: int, n_neg: int,
                        seed=0, max_attempts: int = 1000) -> list[PseudoSample]:
    """Random patches around the annotation.

    Negatives have zero overlap with the box.  Positives cover more than half of
    the box area.  Patch extents are drawn from [0.5, 1.5] x the box extents.
    """
    box.check(image.shape)
    rng = np.random.default_rng(seed)
    dims = image.shape
    samples = []
    for tag, count in ((NORMAL, n_neg), (NODULE, n_pos)):
        for _ in range(count):
            for _attempt in range(max_attempts):
                size = _sample_size(rng, box.extent, dims)
                if tag == NORMAL:
                    origin = [int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size)]
                else:
                    origin = []
                    for o, e, s, d in zip(box.origin, box.extent, size, dims):
                        lo, hi = max(0, o - s + 1), min(d - s, o + e - 1)
                        origin.append(int(rng.integers(lo, hi + 1)) if hi >= lo else max(0, d - s))
                cand = BoundingBox(tuple(origin), tuple(size))
                ov = cand.overlap(box)
                if (tag == NORMAL and ov == 0) or (tag == NODULE and ov > 0.5 * box.size):
                    prov = "negative-patch" if tag == NORMAL else "positive-box"
                    samples.append(PseudoSample(crop(image, cand), tag, prov))
                    break
            else:
                kind = "negative" if tag == NORMAL else "positive"
                raise DataError(f"could not place a {kind} patch after {max_attempts} attempts "
                                f"(image {dims}, box {box})")
    return samples


def fill_augment(image: np.ndarray, box: BoundingBox, smap: SuperRegionMap, source: np.ndarray,
                 r_target: float, seed=0, target_side: int = TARGET_SIDE) -> PseudoSample:
    """Fill random superpixels of the normalized box from ``source`` until the filled fraction reaches
    ``r_target``.  Achieved ratio below 0.5 is tagged nodule, 0.5 and above normal."""
    if not 0.0 <= r_target <= 1.0:
        raise ConfigError(f"fill ratio must be in [0, 1], got {r_target}")
    patch = normalize_region(image, box, target_side)
    if patch.shape != smap.dims or source.shape != smap.dims:
        raise DataError(f"normalized box {patch.shape}, map {smap.dims} and source {source.shape} differ")
    rng = np.random.default_rng(seed)
    total = patch.size
    filled = 0
    for region in rng.permutation(smap.n_regions):
        if filled >= r_target * total:
            break
        cells = smap.cells(region)
        patch.flat[cells] = source.flat[cells]
        filled += len(cells)
    ratio = filled / total
    return PseudoSample(patch, NODULE if ratio < 0.5 else NORMAL, "fill-augmented", ratio)


class Classifier:
    """Wraps a network with its input size and intensity normalization."""

    def __init__(self, net: Sequential, input_size: int = 32, scale: float = 255.0):
        self.net = net
        self.input_size = int(input_size)
        self.scale = float(scale)

    @property
    def ndim(self) -> int:
        return len(self.net.input_shape) - 1

    def prepare(self, patches) -> np.ndarray:
        dims = (self.input_size,) * self.ndim
        batch = np.stack([resize_linear(p, dims) for p in patches])
        return batch[:, None] / self.scale

    def score_batch(self, patches) -> np.ndarray:
        """(N, 2) probabilities ordered (nodule, normal)."""
        if not len(patches):
            return np.zeros((0, 2))
        return softmax(self.net(self.prepare(patches)))

    def score(self, patch) -> np.ndarray:
        if np.asarray(patch).size == 0:
            raise DataError("cannot score an empty patch")
        return self.score_batch([patch])[0]

    def save(self, path) -> None:
        save_networks(path, {"classifier": self.net})
        with open(f"{path}.meta", "w") as fh:
            fh.write(f"input_size = {self.input_size}\nscale = {self.scale!r}\n"
                     f"classes = {' '.join(TAGS)}\n")

    @classmethod
    def load(cls, path) -> "Classifier":
        nets = load_networks(path)
        meta = {}
        try:
            with open(f"{path}.meta") as fh:
                for line in fh:
                    if "=" in line:
                        k, v = line.split("=", 1)
                        meta[k.strip()] = v.strip()
        except FileNotFoundError:
            raise FormatError(f"missing classifier sidecar {path}.meta") from None
        return cls(nets["classifier"], int(meta.get("input_size", 32)), float(meta.get("scale", 255.0)))


def _augment(batch: np.ndarray, rng) -> np.ndarray:
    """Random flips along every spatial axis and a random quarter turn in the first plane."""
    out = batch.copy()
    spatial = tuple(range(2, batch.ndim))
    for i in range(len(out)):
        x = out[i]
        for ax in spatial:
            if rng.random() < 0.5:
                x = np.flip(x, axis=ax - 1)
        x = np.rot90(x, k=int(rng.integers(4)), axes=(1, 2))
        out[i] = x
    return out


def classification_report(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Accuracy plus precision/recall/F1 with *nodule* as the positive class."""
    tp = np.sum((pred == NODULE) & (truth == NODULE))
    fp = np.sum((pred == NODULE) & (truth == NORMAL))
    fn = np.sum((pred == NORMAL) & (truth == NODULE))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": float(np.mean(pred == truth)), "precision": float(precision),
            "recall": float(recall), "f1": float(f1)}


def train_classifier(samples: list[PseudoSample], epochs: int = 20, batch: int = 64, lr: float = 1e-3,
                     seed: int = 0, input_size: int = 32, weight_decay: float = 1e-2,
                     holdout: float = 0.1, init: Classifier | None = None,
                     augment: bool = True) -> tuple[Classifier, dict]:
    """Train with softmax cross-entropy and AdamW; report metrics on a stratified held-out split."""
    tags = np.array([s.tag for s in samples])
    if len(set(tags.tolist())) < 2:
        raise DataError("classifier training needs both nodule and normal samples")
    ndim = samples[0].patch.ndim
    clf = init if init is not None else Classifier(classifier_net(ndim, input_size, seed=seed), input_size)
    rng = np.random.default_rng(seed)
    x_all = clf.prepare([s.patch for s in samples])
    test_idx = []
    for t in (NODULE, NORMAL):
        idx = rng.permutation(np.flatnonzero(tags == t))
        test_idx.extend(idx[:int(round(holdout * len(idx)))])
    test_mask = np.zeros(len(samples), dtype=bool)
    test_mask[test_idx] = True
    x_train, y_train = x_all[~test_mask], tags[~test_mask]
    x_test, y_test = x_all[test_mask], tags[test_mask]

    opt = AdamW([clf.net], lr=lr, weight_decay=weight_decay)
    net = clf.net
    loss = float("nan")
    for epoch in range(epochs):
        perm = rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(perm), batch):
            idx = perm[start:start + batch]
            xb = _augment(x_train[idx], rng) if augment else x_train[idx]
            logits, cache = net.forward(xb)
            loss, g = softmax_cross_entropy(logits, y_train[idx])
            net.zero_grad()
            net.backward(g, cache)
            opt.step()
            losses.append(loss)
        loss = float(np.mean(losses))
        log.debug("classifier epoch %d loss %.4f", epoch, loss)

    report = {"n_train": int(len(x_train)), "n_heldout": int(len(x_test)), "final_loss": loss}
    if len(x_test):
        pred = np.argmax(net(x_test), axis=1)
        report.update(classification_report(pred, y_test))
    return clf, report
