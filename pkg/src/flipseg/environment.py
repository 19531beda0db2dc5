"""Multi-agent erasing environment over a superpixel-encoded box.

Agents walk their own share of regions inner-to-outer and at each step either
pass or erase the current region.  Erased regions are refilled from the eraser
source and the episode ends when the classifier's nodule probability drops
below the stop score, when every agent has used up its traversals, or when
nothing is left to erase.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, StateError
from .grid import BoundingBox, TARGET_SIDE, embed, normalize_region, quantize, resize_linear, \
    resize_nearest
from .metrics import wasserstein_hist
from .superpixel import SuperRegionMap, partition_among_agents, slic, traversal_order

PASS, ERASE = 0, 1
REASONS = ("score-flip", "traversal-limit", "exhausted")


@dataclass
class EpisodeConfig:
    k_agents: int = 2
    state_patch: int = 16
    history: int = 3
    theta: float = 25.0
    max_traversals: int = 2
    stop_score: float = 0.01
    n_segment: int = 100
    compactness: float = 10.0
    slic_iters: int = 10
    target_side: int = TARGET_SIDE

    def validate(self):
        if self.k_agents < 1:
            raise ConfigError("k_agents must be >= 1")
        if self.history < 1:
            raise ConfigError("history must be >= 1")
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if not 0 < self.stop_score < 1:
            raise ConfigError("stop_score must lie in (0, 1)")
        if self.max_traversals < 1 or self.state_patch < 1 or self.n_segment < 1:
            raise ConfigError("max_traversals, state_patch and n_segment must be >= 1")


@dataclass
class Scene:
    """Everything about an episode that does not change while agents act; safe to reuse."""
    original: np.ndarray        # normalized, quantized box region
    source: np.ndarray          # eraser source at normalized dims
    smap: SuperRegionMap        # ranked regions
    agent_regions: list[np.ndarray]
    box: BoundingBox
    image_dims: tuple[int, ...]
    n_segment: int


def build_scene(image: np.ndarray, box: BoundingBox, source: np.ndarray, n_segment: int,
                config: EpisodeConfig, smap: SuperRegionMap | None = None) -> Scene:
    """Crop and normalize the box, encode it with SLIC, rank regions and split them among agents.

    ``source`` is an eraser patch at the original box extent (or already at the
    normalized dims); it is resampled onto the normalized grid.
    """
    config.validate()
    original = normalize_region(image, box, config.target_side)
    if source.shape != original.shape:
        if source.shape != box.extent:
            raise DataError(f"eraser source {source.shape} matches neither the box {box.extent} "
                            f"nor the normalized dims {original.shape}")
        source = resize_linear(source, original.shape)
    source = quantize(source)
    if smap is None:
        smap = slic(original, min(n_segment, original.size), config.compactness, config.slic_iters)
    center = (np.array(original.shape) - 1) / 2.0
    traversal_order(smap, center)
    k = min(config.k_agents, smap.n_regions)
    parts = partition_among_agents(smap, k)
    return Scene(original, source, smap, parts, box, tuple(image.shape), n_segment)


@dataclass
class StepOutcome:
    csr: int
    idr1: int
    idr2: int
    reward: int
    rewards: list[int]            # per agent; shared signal, so all equal
    terminal: bool
    reason: str | None
    sc: float                     # normal-tissue probability
    nodule_score: float
    wd1: float
    wd2: float
    wd3: float
    erased_fraction: float
    actions: tuple[int, ...]


@dataclass
class EpisodeState:
    scene: Scene
    config: EpisodeConfig
    image: np.ndarray
    erased: np.ndarray                      # (R,) bool
    erased_cells: np.ndarray                # flat bool over the normalized grid
    pass_lists: list[np.ndarray]
    pos: list[int]
    passes: list[int]
    done: list[bool]
    history: list[deque]
    sc: float
    nodule_score: float
    fg_hist: np.ndarray
    bg_hist: np.ndarray
    wd3: float = 0.0
    steps: int = 0
    terminal: bool = False
    reason: str | None = None
    last_region: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.pass_lists)

    def cursor(self, agent: int) -> int:
        """Region the agent is currently looking at (its last one once it has finished)."""
        if self.done[agent]:
            return self.last_region[agent]
        return int(self.pass_lists[agent][self.pos[agent]])

    @property
    def fg_size(self) -> int:
        return int(self.fg_hist.sum())

    @property
    def bg_size(self) -> int:
        return int(self.bg_hist.sum())

    @property
    def erased_fraction(self) -> float:
        return float(self.erased_cells.mean())


def _hist(values) -> np.ndarray:
    return np.bincount(np.asarray(values, dtype=np.int64), minlength=256)


def _patch(image: np.ndarray, center, size: int) -> np.ndarray:
    out = np.zeros((size,) * image.ndim)
    src, dst = [], []
    for c, d in zip(center, image.shape):
        lo = int(round(c)) - size // 2
        a, b = max(lo, 0), min(lo + size, d)
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = image[tuple(src)]
    return out


def _nodule_score(classifier, image) -> tuple[float, float]:
    p = classifier.score(image)
    return float(p[1]), float(p[0])


def reset(scene: Scene, classifier, config: EpisodeConfig | None = None) -> EpisodeState:
    config = config or EpisodeConfig()
    config.validate()
    smap = scene.smap
    sc, nod = _nodule_score(classifier, scene.original)
    state = EpisodeState(
        scene=scene, config=config, image=scene.original.copy(),
        erased=np.zeros(smap.n_regions, dtype=bool),
        erased_cells=np.zeros(scene.original.size, dtype=bool),
        pass_lists=[p.copy() for p in scene.agent_regions],
        pos=[0] * len(scene.agent_regions), passes=[0] * len(scene.agent_regions),
        done=[False] * len(scene.agent_regions), history=[],
        sc=sc, nodule_score=nod,
        fg_hist=np.zeros(256, dtype=np.int64), bg_hist=_hist(scene.original.ravel()),
        last_region=[int(p[0]) for p in scene.agent_regions],
    )
    for agent in range(state.k):
        frame = _current_patch(state, agent)
        state.history.append(deque([frame] * config.history, maxlen=config.history))
    return state


def _current_patch(state: EpisodeState, agent: int) -> np.ndarray:
    center = state.scene.smap.centroids[state.cursor(agent)]
    return _patch(state.image, center, state.config.state_patch)


def observe(state: EpisodeState, agent: int) -> np.ndarray:
    """The agent's last ``history`` patches, oldest first: shape (history, P, P[, P])."""
    return np.stack(state.history[agent])


def joint_observation(state: EpisodeState) -> np.ndarray:
    """All agents' stacks concatenated along the channel axis: (history*K, P, P[, P])."""
    return np.concatenate([observe(state, a) for a in range(state.k)])


def csr_reward(sc_prev: float, sc: float) -> int:
    return int(np.sign(sc - sc_prev))


def idr1_reward(wd1: float, theta: float) -> int:
    if wd1 == 0:
        return 0
    return 1 if wd1 <= theta else -1


def idr2_reward(wd2: float, wd3: float) -> int:
    return int(np.sign(wd3 - wd2))


def _advance(state: EpisodeState, agent: int) -> None:
    if state.done[agent]:
        return
    state.last_region[agent] = state.cursor(agent)
    lst = state.pass_lists[agent]
    p = state.pos[agent] + 1
    while p < len(lst) and state.erased[lst[p]]:
        p += 1
    if p < len(lst):
        state.pos[agent] = p
        return
    state.passes[agent] += 1
    remaining = state.scene.agent_regions[agent]
    remaining = remaining[~state.erased[remaining]]
    if state.passes[agent] >= state.config.max_traversals or len(remaining) == 0:
        state.done[agent] = True
        return
    state.pass_lists[agent] = remaining
    state.pos[agent] = 0


def step(state: EpisodeState, actions, classifier) -> tuple[EpisodeState, StepOutcome]:
    """Apply one joint action (one decision per agent), then score and reward the new image.

    Mutates and returns ``state``.
    """
    if state.terminal:
        raise StateError(f"episode already terminated ({state.reason})")
    actions = tuple(int(a) for a in actions)
    if len(actions) != state.k:
        raise ConfigError(f"expected {state.k} actions, got {len(actions)}")
    smap, source = state.scene.smap, state.scene.source
    fg_prev = state.fg_hist.copy()
    changed = False
    for agent, a in enumerate(actions):
        if a not in (PASS, ERASE):
            raise ConfigError(f"unknown action {a}")
        if state.done[agent] or a == PASS:
            continue
        region = state.cursor(agent)
        if state.erased[region]:
            continue
        cells = smap.cells(region)
        values = state.scene.original.flat[cells].astype(np.int64)
        h = _hist(values)
        state.fg_hist += h
        state.bg_hist -= h
        state.image.flat[cells] = source.flat[cells]
        state.erased[region] = True
        state.erased_cells[cells] = True
        changed = True
    for agent in range(state.k):
        _advance(state, agent)

    sc_prev = state.sc
    wd2 = state.wd3
    if changed:
        state.sc, state.nodule_score = _nodule_score(classifier, state.image)
        if fg_prev.sum() > 0:
            wd1 = wasserstein_hist(fg_prev, state.fg_hist)
            idr1 = idr1_reward(wd1, state.config.theta)
        else:
            wd1, idr1 = float("nan"), 0
        state.wd3 = wasserstein_hist(state.bg_hist, state.fg_hist) if state.bg_hist.sum() > 0 else 0.0
    else:
        wd1, idr1 = 0.0, 0
    wd3 = state.wd3
    csr = csr_reward(sc_prev, state.sc)
    idr2 = idr2_reward(wd2, wd3)
    total = csr + idr1 + idr2
    state.steps += 1

    for agent in range(state.k):
        state.history[agent].append(_current_patch(state, agent))

    if state.nodule_score < state.config.stop_score:
        state.terminal, state.reason = True, "score-flip"
    elif state.erased.all():
        state.terminal, state.reason = True, "exhausted"
    elif all(state.done):
        state.terminal, state.reason = True, "traversal-limit"

    outcome = StepOutcome(csr, idr1, idr2, total, [total] * state.k, state.terminal, state.reason,
                          state.sc, state.nodule_score, wd1, wd2, wd3, state.erased_fraction, actions)
    return state, outcome


def normalized_mask(state: EpisodeState) -> np.ndarray:
    return state.erased_cells.reshape(state.scene.original.shape)


def extract_mask(state: EpisodeState) -> np.ndarray:
    """Erased cells mapped back to the box extent (nearest neighbour) inside an image-sized mask."""
    scene = state.scene
    local = resize_nearest(normalized_mask(state), scene.box.extent)
    return embed(local, scene.box, scene.image_dims, fill=False)
