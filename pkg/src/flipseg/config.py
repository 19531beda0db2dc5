"""Run configuration: an INI file with fixed sections, strict keys and bounds.

Every command resolves the file (plus ``--set section.key=value`` overrides)
into a :class:`RunConfig` and writes the resolved copy next to its outputs.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .environment import EpisodeConfig
from .errors import ConfigError
from .grid import SyntheticSpec
from .learner import AgentHyper, CurriculumSchedule


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schedule(text: str) -> str:
    CurriculumSchedule.parse(text)
    return " ".join(text.split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default, check, description).  ``check`` returns True when the value is in bounds.
Field = tuple[Callable[[str], Any], Any, Callable[[Any], bool], str]

_pos = lambda v: v > 0            # noqa: E731
_nonneg = lambda v: v >= 0        # noqa: E731
_unit = lambda v: 0 <= v <= 1     # noqa: E731
_any = lambda v: True             # noqa: E731
_pair = lambda v: len(v) == 2 and v[0] <= v[1]   # noqa: E731
_dims = lambda v: len(v) in (2, 3) and min(v) >= 16  # noqa: E731

SCHEMA: dict[str, dict[str, Field]] = {
    "data": {
        "root": (str, "data", _any, "dataset directory (written by gen-data, read by the others)"),
        "n_images": (int, 300, _pos, "images generated in total"),
        "val_fraction": (float, 1 / 6, _unit, "fraction of images in the val split"),
        "test_fraction": (float, 1 / 6, _unit, "fraction of images in the test split"),
        "dims": (_ints, (160, 160), _dims, "image dims, 2 or 3 axes"),
        "nodules": (_ints, (1, 1), _pair, "nodule count range"),
        "radius": (_floats, (14.0, 28.0), _pair, "nodule radius range in cells"),
        "fg_mean": (_floats, (40.0, 70.0), _pair, "nodule mean intensity range"),
        "bg_mean": (_floats, (115.0, 150.0), _pair, "tissue mean intensity range"),
        "mean_margin": (float, 30.0, _nonneg, "minimum tissue minus nodule mean"),
        "speckle": (float, 0.6, _nonneg, "multiplicative speckle strength"),
        "texture": (float, 0.08, _nonneg, "smooth tissue texture strength"),
        "irregularity": (float, 0.25, _nonneg, "nodule boundary irregularity"),
        "hypoechoic": (_bool, True, _any, "nodules darker than tissue"),
        "seed": (int, 0, _nonneg, "generator seed"),
    },
    "classifier": {
        "n_pos": (int, 3, _pos, "positive patches mined per training image"),
        "n_neg": (int, 3, _pos, "negative patches mined per training image"),
        "fill_per_level": (int, 2, _nonneg, "fill-augmented samples per image and SLIC level"),
        "fill_segments": (_ints, (100, 1000), lambda v: len(v) > 0 and min(v) > 0,
                          "SLIC region counts used for fill augmentation"),
        "fill_margin": (float, 0.1, lambda v: 0 <= v < 0.5, "distance of fill targets from the 0.5 boundary"),
        "epochs_mined": (int, 8, _pos, "epochs on mined samples"),
        "epochs_filled": (int, 10, _nonneg, "further epochs after adding fill-augmented samples"),
        "batch": (int, 32, _pos, "mini-batch size"),
        "lr": (float, 1e-3, _pos, "AdamW learning rate"),
        "weight_decay": (float, 1e-2, _nonneg, "AdamW decoupled weight decay"),
        "input_size": (int, 0, _nonneg, "network input side; 0 picks 32 (2-D) or 24 (3-D)"),
        "holdout": (float, 0.1, lambda v: 0 <= v < 1, "held-out fraction for the report"),
        "augment": (_bool, True, _any, "random flips and quarter turns while training"),
    },
    "agents": {
        "k_agents": (int, 0, lambda v: 0 <= v <= 6, "agents; 0 picks 2 (2-D) or 4 (3-D)"),
        "epochs": (int, 0, _nonneg, "full-length epochs; 0 picks 100 (2-D) or 150 (3-D)"),
        "epoch_scale": (float, 1.0, lambda v: 0 < v <= 1, "factor applied to epochs and curriculum"),
        "gamma": (float, 0.9, lambda v: 0 <= v < 1, "discount"),
        "lr": (float, 5e-5, _pos, "AdamW learning rate"),
        "weight_decay": (float, 1e-2, _nonneg, "AdamW decoupled weight decay"),
        "batch": (int, 32, _pos, "replay mini-batch"),
        "buffer_capacity": (int, 0, _nonneg, "replay capacity; 0 picks 8000 (2-D) or 2000 (3-D)"),
        "alpha": (float, 0.6, _unit, "priority exponent"),
        "beta_start": (float, 0.4, _unit, "initial importance-sampling exponent"),
        "priority_floor": (float, 1e-3, _pos, "added to |TD| for new priorities"),
        "sync_every": (int, 1200, _pos, "gradient steps between target copies"),
        "eps_start": (float, 1.0, _unit, "initial exploration rate"),
        "eps_end": (float, 0.1, _unit, "final exploration rate"),
        "eps_fraction": (float, 0.3, lambda v: 0 < v <= 1, "share of training used to anneal epsilon"),
        "warmup": (int, 500, _nonneg, "transitions stored before the first update"),
        "train_every": (int, 1, _pos, "environment steps per gradient step"),
        "channels": (_ints, (16, 32), lambda v: len(v) > 0 and min(v) > 0, "conv trunk widths"),
        "hidden": (int, 64, _pos, "hidden units per agent head"),
        "theta": (float, 25.0, _pos, "WD1 threshold of the first intensity reward"),
        "max_traversals": (int, 2, _pos, "passes each agent may make"),
        "stop_score": (float, 0.01, lambda v: 0 < v < 1, "nodule probability that ends an episode"),
        "state_patch": (int, 16, _pos, "observation patch side"),
        "history": (int, 3, _pos, "frames per agent observation"),
        "compactness": (float, 10.0, _pos, "SLIC compactness"),
        "slic_iters": (int, 10, _pos, "SLIC iterations"),
        "target_side": (int, 100, lambda v: v >= 16, "shortest box side after normalization"),
    },
    "curriculum": {
        "schedule": (_schedule, "", _any, "epoch:n_segment pairs; empty picks the dimension default"),
    },
    "run": {
        "seed": (int, 0, _nonneg, "seed for training and sampling"),
        "out_dir": (str, "runs", _any, "root for command outputs"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    source: str | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    @property
    def ndim(self) -> int:
        return len(self["data"]["dims"])

    @property
    def seed(self) -> int:
        return self["run"]["seed"]

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        d = self["data"]
        return SyntheticSpec(dims=d["dims"], nodule_count=d["nodules"], radius=d["radius"],
                             fg_mean=d["fg_mean"], bg_mean=d["bg_mean"], mean_margin=d["mean_margin"],
                             speckle=d["speckle"], texture=d["texture"], irregularity=d["irregularity"],
                             hypoechoic=d["hypoechoic"], seed=seed)

    def classifier_input(self, ndim: int) -> int:
        return self["classifier"]["input_size"] or (32 if ndim == 2 else 24)

    def episode_config(self, ndim: int) -> EpisodeConfig:
        a = self["agents"]
        cfg = EpisodeConfig(k_agents=a["k_agents"] or (2 if ndim == 2 else 4), state_patch=a["state_patch"],
                            history=a["history"], theta=a["theta"], max_traversals=a["max_traversals"],
                            stop_score=a["stop_score"], compactness=a["compactness"],
                            slic_iters=a["slic_iters"], target_side=a["target_side"])
        cfg.validate()
        return cfg

    def full_epochs(self, ndim: int) -> int:
        return self["agents"]["epochs"] or (100 if ndim == 2 else 150)

    def scaled_epochs(self, ndim: int) -> int:
        return max(1, int(round(self.full_epochs(ndim) * self["agents"]["epoch_scale"])))

    def schedule(self, ndim: int) -> CurriculumSchedule:
        text = self["curriculum"]["schedule"]
        sched = CurriculumSchedule.parse(text) if text else CurriculumSchedule.default(ndim)
        return sched.scaled(self["agents"]["epoch_scale"])

    def agent_hyper(self, ndim: int) -> AgentHyper:
        a = self["agents"]
        hyper = AgentHyper(
            epochs=self.scaled_epochs(ndim), gamma=a["gamma"], lr=a["lr"], weight_decay=a["weight_decay"],
            batch=a["batch"], buffer_capacity=a["buffer_capacity"] or (8000 if ndim == 2 else 2000),
            alpha=a["alpha"], beta_start=a["beta_start"], priority_floor=a["priority_floor"],
            sync_every=a["sync_every"], eps_start=a["eps_start"], eps_end=a["eps_end"],
            eps_fraction=a["eps_fraction"], warmup=a["warmup"], train_every=a["train_every"],
            channels=a["channels"], hidden=a["hidden"])
        hyper.validate()
        return hyper

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, fields in SCHEMA.items():
            parser[section] = {k: _fmt(self.values[section][k]) for k in fields}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, directory) -> Path:
        """Write the resolved configuration as ``config.ini`` inside ``directory``."""
        path = Path(directory) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _parse_field(section: str, key: str, text: str):
    fields = SCHEMA.get(section)
    if fields is None:
        raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
    if key not in fields:
        raise ConfigError(f"unknown key {section}.{key}")
    parse, _default, check, doc = fields[key]
    try:
        value = parse(text.strip())
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None
    if not check(value):
        raise ConfigError(f"{section}.{key} = {text.strip()} is out of bounds ({doc})")
    return value


def defaults() -> RunConfig:
    return RunConfig({s: {k: f[1] for k, f in fields.items()} for s, fields in SCHEMA.items()})


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the INI file at ``path`` (if given), then ``section.key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser[section].items():
                cfg.values.setdefault(section, {})
                cfg.values[section][key] = _parse_field(section, key, text)
        cfg.source = str(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, text = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        cfg.values[section][key] = _parse_field(section, key, text)
    d = cfg["data"]
    if d["val_fraction"] + d["test_fraction"] >= 1:
        raise ConfigError("val_fraction + test_fraction must leave room for a train split")
    cfg.schedule(cfg.ndim)
    return cfg


def describe() -> str:
    """Human-readable key reference, used by ``--help``."""
    lines = []
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_p, default, _c, doc) in fields.items():
            lines.append(f"  {key} = {_fmt(default)}    # {doc}")
    return "\n".join(lines)
