"""End-to-end workflow behind the CLI: classifier building, agent training, segmentation, evaluation.

Each ``cmd_*`` function takes a resolved :class:`~flipseg.config.RunConfig`,
writes its outputs (always including ``config.ini``) and returns a small dict
summarizing what it did, so the CLI and the tests share one code path.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from pathlib import Path

import numpy as np

from .classifier import Classifier, PseudoSample, fill_augment, mine_pseudo_samples, train_classifier
from .config import RunConfig
from .dataset import Case, generate_dataset, image_suffix, load_directory, load_split
from .environment import EpisodeConfig
from .eraser import generate_candidates, select_source
from .errors import DataError, NumericError
from .grid import normalize_region, quantize, read_mask, resize_linear, write_mask
from .learner import EPISODE_FIELDS, EPOCH_FIELDS, TRACE_FIELDS, QNetwork, TrainItem, TrainResult, \
    infer, load_checkpoint, save_checkpoint, train
from .metrics import segmentation_scores
from .superpixel import slic

log = logging.getLogger(__name__)

CLASSIFIER_FILE = "classifier.flnn"
AGENTS_FILE = "agents.flnn"
METRIC_FIELDS = ("dice", "jac", "hd", "asd")


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _cell(r.get(k, "")) for k in fields})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, np.floating):
        return repr(float(v))
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_kv(path, info: dict) -> None:
    with open(path, "w") as fh:
        for k, v in info.items():
            fh.write(f"{k} = {_cell(v)}\n")


def _resolve_model(path, filename: str) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / filename
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    return path


def load_classifier(path) -> Classifier:
    return Classifier.load(_resolve_model(path, CLASSIFIER_FILE))


# --------------------------------------------------------------------------- gen-data

def cmd_gen_data(cfg: RunConfig, out=None) -> dict:
    root = Path(out or cfg["data"]["root"])
    rows = generate_dataset(root, cfg)
    counts = {s: sum(r["split"] == s for r in rows) for s in ("train", "val", "test")}
    log.info("wrote %d cases to %s (%s)", len(rows), root, counts)
    return {"root": str(root), "cases": len(rows), **counts}


# --------------------------------------------------------------------------- classifier

def candidate_rows(case: Case, classifier: Classifier) -> list[dict]:
    cands = generate_candidates(case.image, case.box)
    best = select_source(cands, classifier)
    return [{"image": case.name, "kind": c.kind, "normal_score": c.score, "selected": int(c is best)}
            for c in cands]


def fill_samples(case: Case, source: np.ndarray, levels, per_level: int, rng,
                 target_side: int = 100, margin: float = 0.1) -> list[PseudoSample]:
    """Fill-augmented samples; targets alternate between the nodule half and the normal half and
    stay ``margin`` away from the 0.5 tag boundary."""
    box_region = normalize_region(case.image, case.box, target_side)
    src = quantize(resize_linear(source, box_region.shape))
    out = []
    for n in levels:
        smap = slic(box_region, min(n, box_region.size))
        for j in range(per_level):
            r = rng.uniform(0.0, 0.5 - margin) if j % 2 == 0 else rng.uniform(0.5 + margin, 1.0)
            out.append(fill_augment(case.image, case.box, smap, src, r, seed=int(rng.integers(2**31)),
                                    target_side=target_side))
    return out


def build_classifier(cases: list[Case], cfg: RunConfig, seed: int | None = None):
    """Mine box-derived samples, train, add fill-augmented samples built from the selected eraser
    sources, and continue training.  Returns (classifier, report, candidate rows)."""
    c = cfg["classifier"]
    seed = cfg.seed if seed is None else seed
    ndim = cases[0].image.ndim
    input_size = cfg.classifier_input(ndim)
    t0 = time.process_time()
    mined = []
    for i, case in enumerate(cases):
        mined += mine_pseudo_samples(case.image, case.box, c["n_pos"], c["n_neg"], seed=seed * 7919 + i)
    common = dict(batch=c["batch"], lr=c["lr"], input_size=input_size, weight_decay=c["weight_decay"],
                  holdout=c["holdout"], augment=c["augment"])
    clf, report = train_classifier(mined, epochs=c["epochs_mined"], seed=seed, **common)
    log.info("classifier on %d mined samples: %s", len(mined), report)
    rng = np.random.default_rng(seed + 1)
    candidates, fills = [], []
    for case in cases:
        rows = candidate_rows(case, clf)
        candidates += rows
        if c["epochs_filled"] and c["fill_per_level"]:
            kind = next(r["kind"] for r in rows if r["selected"])
            src = {cand.kind: cand for cand in generate_candidates(case.image, case.box)}[kind].patch
            fills += fill_samples(case, src, c["fill_segments"], c["fill_per_level"], rng,
                                  cfg["agents"]["target_side"], c["fill_margin"])
    if fills:
        clf, report = train_classifier(mined + fills, epochs=c["epochs_filled"], seed=seed + 2, init=clf,
                                       **common)
        log.info("classifier after %d fill-augmented samples: %s", len(fills), report)
    report = dict(report)
    report.update({"mined_samples": len(mined), "fill_samples": len(fills), "input_size": input_size,
                   "cpu_seconds": time.process_time() - t0})
    if not math.isfinite(report["final_loss"]):
        raise NumericError("classifier loss is not finite")
    return clf, report, candidates


def cmd_train_classifier(cfg: RunConfig, out=None, dump_candidates: bool = False) -> dict:
    out = Path(out or Path(cfg["run"]["out_dir"]) / "classifier")
    out.mkdir(parents=True, exist_ok=True)
    cases = load_split(cfg["data"]["root"], "train")
    clf, report, candidates = build_classifier(cases, cfg)
    clf.save(out / CLASSIFIER_FILE)
    _write_kv(out / "report.txt", report)
    if dump_candidates:
        _write_csv(out / "candidates.csv", ("image", "kind", "normal_score", "selected"), candidates)
    cfg.write(out)
    return report


# --------------------------------------------------------------------------- agents

def training_items(cases: list[Case], classifier: Classifier) -> list[TrainItem]:
    return [TrainItem(c.image, c.box, select_source(generate_candidates(c.image, c.box), classifier).patch,
                      c.name) for c in cases]


def run_manifest(cfg: RunConfig, ndim: int, epoch: int) -> dict:
    hyper = cfg.agent_hyper(ndim)
    return {"seed": cfg.seed, "schedule": str(cfg.schedule(ndim)), "epochs": hyper.epochs,
            "completed_epochs": epoch + 1, "ndim": ndim, "patch": cfg["agents"]["state_patch"],
            "history": cfg["agents"]["history"], "channels": " ".join(map(str, hyper.channels)),
            "hidden": hyper.hidden, "gamma": hyper.gamma, "lr": hyper.lr, "batch": hyper.batch,
            "buffer_capacity": hyper.buffer_capacity, "sync_every": hyper.sync_every,
            "train_every": hyper.train_every}


def cmd_train_agents(cfg: RunConfig, classifier_path, out=None, resume=None) -> dict:
    out = Path(out or Path(cfg["run"]["out_dir"]) / "agents")
    out.mkdir(parents=True, exist_ok=True)
    clf = load_classifier(classifier_path)
    cases = load_split(cfg["data"]["root"], "train")
    ndim = cases[0].image.ndim
    config = cfg.episode_config(ndim)
    hyper = cfg.agent_hyper(ndim)
    schedule = cfg.schedule(ndim)
    items = training_items(cases, clf)
    start, previous, epoch_rows = 0, None, []
    if resume is not None:
        path = _resolve_model(resume, AGENTS_FILE)
        previous, info = load_checkpoint(path, hyper)
        start = int(info.get("completed_epochs", 0))
        log_dir = path.parent
        if (log_dir / "epoch_log.csv").is_file():
            epoch_rows = read_csv(log_dir / "epoch_log.csv")[:start]
        if (log_dir / "train_log.csv").is_file():
            previous.episode_log = [r for r in read_csv(log_dir / "train_log.csv") if int(r["epoch"]) < start]
        previous.epoch_log = epoch_rows
        log.info("resuming from %s at epoch %d", path, start)
    cfg.write(out)
    t0 = time.process_time()

    def on_epoch(epoch: int, result: TrainResult):
        save_checkpoint(out / AGENTS_FILE, result, run_manifest(cfg, ndim, epoch))
        _write_csv(out / "train_log.csv", EPISODE_FIELDS, result.episode_log)
        _write_csv(out / "epoch_log.csv", EPOCH_FIELDS, result.epoch_log)

    result = train(items, clf, schedule, hyper, config, seed=cfg.seed, resume=previous, start_epoch=start,
                   on_epoch=on_epoch)
    from .plotting import plot_training
    plot_training(result.epoch_log, out / "training.png")
    summary = {"epochs": hyper.epochs, "start_epoch": start, "episodes": len(result.episode_log),
               "env_steps": result.env_steps, "grad_steps": result.grad_steps,
               "cpu_seconds": time.process_time() - t0}
    _write_kv(out / "summary.txt", summary)
    return summary


# --------------------------------------------------------------------------- segment

def segment_case(qnet: QNetwork, clf: Classifier, case: Case, n_segment: int, config: EpisodeConfig):
    """Greedy erase on one case; returns (mask, trace rows, summary row)."""
    mask, trace, state = infer(qnet, case.image, case.box, clf, n_segment, config, gt=case.mask)
    row = {"image": case.name, "steps": state.steps, "reason": state.reason or "step-limit",
           "final_sc": state.sc, "final_nodule_score": state.nodule_score,
           "erased_fraction": state.erased_fraction}
    if case.mask is not None:
        row.update(segmentation_scores(mask, case.mask))
    return mask, trace, row


SEGMENT_FIELDS = ("image", "steps", "reason", "final_sc", "final_nodule_score", "erased_fraction") \
    + METRIC_FIELDS


def cmd_segment(cfg: RunConfig, model, classifier_path, cases: list[Case], out=None,
                n_segment: int | None = None) -> list[dict]:
    out = Path(out or Path(cfg["run"]["out_dir"]) / "segment")
    out.mkdir(parents=True, exist_ok=True)
    ndim = cases[0].image.ndim
    config = cfg.episode_config(ndim)
    qnet = load_checkpoint(_resolve_model(model, AGENTS_FILE))[0].qnet
    if qnet.k != config.k_agents:
        config.k_agents = qnet.k
    clf = load_classifier(classifier_path)
    n_segment = n_segment or cfg.schedule(ndim).final
    rows = []
    for case in cases:
        mask, trace, row = segment_case(qnet, clf, case, n_segment, config)
        write_mask(out / f"{case.name}_mask{image_suffix(case.image.ndim)}", mask)
        _write_csv(out / f"{case.name}_trace.csv", TRACE_FIELDS, trace)
        rows.append(row)
        log.info("%s: %d steps, %s, erased %.3f", case.name, row["steps"], row["reason"],
                 row["erased_fraction"])
    _write_csv(out / "summary.csv", SEGMENT_FIELDS, rows)
    cfg.write(out)
    return rows


def select_cases(cfg: RunConfig, image=None, box=None, split=None, directory=None) -> list[Case]:
    from .grid import read_box, read_image
    if image is not None:
        if box is None:
            raise DataError("--image needs --box")
        img = read_image(image)
        name = Path(image).stem
        mask_path = Path(image).with_name(f"{name}_mask{Path(image).suffix}")
        mask = read_mask(mask_path) if mask_path.is_file() else None
        return [Case(name, img, mask, read_box(box))]
    if directory is not None:
        return load_directory(directory)
    return load_split(cfg["data"]["root"], split or "test")


# --------------------------------------------------------------------------- eval

def _masks_by_name(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = {}
    for path in sorted(directory.iterdir()):
        for suffix in (".pgm", ".flv"):
            tail = f"_mask{suffix}"
            if path.name.endswith(tail):
                found[path.name[:-len(tail)]] = path
    return found


def aggregate(rows: list[dict]) -> dict[str, tuple[float, float]]:
    """Mean and population std per metric, skipping NaN distances."""
    out = {}
    for k in METRIC_FIELDS:
        v = np.array([float(r[k]) for r in rows], dtype=np.float64)
        v = v[np.isfinite(v)]
        out[k] = (float(v.mean()), float(v.std())) if len(v) else (float("nan"), float("nan"))
    return out


def evaluate_dirs(pred_dir, gt_dir) -> tuple[list[dict], dict]:
    preds, gts = _masks_by_name(pred_dir), _masks_by_name(gt_dir)
    missing = sorted(set(gts) - set(preds))
    if not gts:
        raise DataError(f"no *_mask files in {gt_dir}")
    if missing:
        raise DataError(f"{len(missing)} ground-truth masks have no prediction, e.g. {missing[0]}")
    rows = []
    for name in sorted(gts):
        pred, gt = read_mask(preds[name]), read_mask(gts[name])
        if pred.shape != gt.shape:
            raise DataError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        rows.append({"image": name, **segmentation_scores(pred, gt)})
    return rows, aggregate(rows)


def format_eval(rows, agg) -> str:
    lines = ["image," + ",".join(METRIC_FIELDS)]
    for r in rows:
        lines.append(r["image"] + "," + ",".join(f"{r[k]:.6f}" for k in METRIC_FIELDS))
    lines.append("mean," + ",".join(f"{agg[k][0]:.6f}" for k in METRIC_FIELDS))
    lines.append("std," + ",".join(f"{agg[k][1]:.6f}" for k in METRIC_FIELDS))
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, pred_dir, gt_dir, out=None) -> tuple[list[dict], dict]:
    rows, agg = evaluate_dirs(pred_dir, gt_dir)
    out = Path(out or pred_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(format_eval(rows, agg))
    from .plotting import plot_eval
    plot_eval(rows, out / "eval.png")
    cfg.write(out)
    return rows, agg


# --------------------------------------------------------------------------- trace plot

def cmd_dump_trace_plot(trace_path, out=None) -> Path:
    from .plotting import plot_trace
    rows = read_csv(trace_path)
    if not rows:
        raise DataError(f"empty trace {trace_path}")
    out = Path(out or Path(trace_path).with_suffix(".svg"))
    plot_trace(rows, out)
    return out

