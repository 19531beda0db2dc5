"""Double DQN with prioritized replay for the multi-agent eraser, plus the curriculum driver."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .environment import ERASE, PASS, EpisodeConfig, Scene, build_scene, extract_mask, \
    joint_observation, reset, step
from .errors import ConfigError, DataError
from .neural import AdamW, Dense, Flatten, ReLU, Sequential, conv_block, load_networks, \
    save_networks

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- network

class QNetwork:
    """Shared convolutional trunk over the stacked agent observations, one dense head per agent."""

    def __init__(self, k_agents=2, ndim=2, patch=16, history=3, channels=(16, 32), hidden=64,
                 seed=0, nets: dict[str, Sequential] | None = None):
        self.k = int(k_agents)
        self.scale = 255.0
        if nets is not None:
            self.trunk = nets["trunk"]
            self.heads = [nets[f"head{i}"] for i in range(self.k)]
            return
        rng = np.random.default_rng(seed)
        in_shape = (history * self.k,) + (patch,) * ndim
        layers = []
        cin = in_shape[0]
        for c in channels:
            layers += conv_block(cin, c, ndim, rng)
            cin = c
        layers.append(Flatten())
        self.trunk = Sequential(layers, in_shape)
        feat = self.trunk.output_shape(in_shape)[0]
        self.heads = [Sequential([Dense(feat, hidden, rng), ReLU(), Dense(hidden, 2, rng)], (feat,))
                      for _ in range(self.k)]

    @property
    def nets(self) -> dict[str, Sequential]:
        out = {"trunk": self.trunk}
        out.update({f"head{i}": h for i, h in enumerate(self.heads)})
        return out

    @property
    def input_shape(self):
        return self.trunk.input_shape

    def forward(self, x):
        feat, tcache = self.trunk.forward(np.asarray(x, dtype=np.float64) / self.scale)
        outs = [h.forward(feat) for h in self.heads]
        q = np.stack([o for o, _ in outs], axis=1)
        return q, (tcache, [c for _, c in outs])

    def __call__(self, x):
        feat = self.trunk(np.asarray(x, dtype=np.float64) / self.scale)
        return np.stack([h(feat) for h in self.heads], axis=1)

    def zero_grad(self):
        for net in self.nets.values():
            net.zero_grad()

    def backward(self, dq, cache):
        tcache, hcaches = cache
        dfeat = sum(h.backward(dq[:, i], c) for i, (h, c) in enumerate(zip(self.heads, hcaches)))
        return self.trunk.backward(dfeat, tcache) / self.scale

    def copy_from(self, other: "QNetwork"):
        for name, net in self.nets.items():
            net.copy_from(other.nets[name])

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.k, nets={n: _clone_net(v) for n, v in self.nets.items()})
        return twin


def _clone_net(net: Sequential) -> Sequential:
    import copy
    twin = copy.deepcopy(net)
    twin.version = 0
    return twin


def select_actions(qnet: QNetwork, observation, epsilon: float, rng) -> np.ndarray:
    """Epsilon-greedy per agent head; greedy ties resolve to passing."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must be in [0, 1], got {epsilon}")
    q = qnet(np.asarray(observation)[None])[0]
    actions = np.where(q[:, ERASE] > q[:, PASS], ERASE, PASS)
    for k in range(qnet.k):
        if rng.random() < epsilon:
            actions[k] = rng.integers(2)
    return actions


def ddqn_targets(rewards, terminal, q_next_online, q_next_target, gamma: float) -> np.ndarray:
    """Y = r + gamma * Q_target(s', argmax_a Q_online(s', a)) per head; Y = r at terminal states."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must be in [0, 1), got {gamma}")
    best = np.argmax(q_next_online, axis=-1)
    value = np.take_along_axis(q_next_target, best[..., None], axis=-1)[..., 0]
    rewards = np.asarray(rewards, dtype=np.float64)[:, None]
    alive = 1.0 - np.asarray(terminal, dtype=np.float64)[:, None]
    return rewards + gamma * alive * value


def ddqn_loss(qnet: QNetwork, target: QNetwork, batch: dict, weights, gamma: float,
              backward: bool = True, targets=None):
    """Importance-weighted squared TD error, summed over heads and averaged over the batch.

    Returns (loss, td) where td has shape (N, K).  With ``backward`` the online
    network's gradients are (re)computed; targets are treated as constants.
    """
    q, cache = qnet.forward(batch["state"])
    if targets is None:
        targets = ddqn_targets(batch["reward"], batch["terminal"], qnet(batch["next_state"]),
                               target(batch["next_state"]), gamma)
    actions = np.asarray(batch["action"], dtype=np.int64)
    qa = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]
    td = targets - qa
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    loss = float(np.mean(w * (td ** 2).sum(axis=1)))
    if backward:
        dq = np.zeros_like(q)
        np.put_along_axis(dq, actions[..., None], (-2.0 * w[:, None] * td / n)[..., None], axis=-1)
        qnet.zero_grad()
        qnet.backward(dq, cache)
    return loss, td


# --------------------------------------------------------------------------- replay

class ReplayBuffer:
    """Ring buffer with proportional prioritization: P(i) = p_i^alpha / sum_j p_j^alpha."""

    def __init__(self, capacity: int, state_shape, k_agents: int, alpha=0.6, priority_floor=1e-3,
                 dtype=np.float32):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self.alpha, self.floor = float(alpha), float(priority_floor)
        self.states = np.zeros((capacity,) + tuple(state_shape), dtype=dtype)
        self.next_states = np.zeros_like(self.states)
        self.actions = np.zeros((capacity, k_agents), dtype=np.int8)
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.priorities = np.zeros(capacity)
        self.size = 0
        self.head = 0
        self.max_priority = 1.0

    def __len__(self):
        return self.size

    def push(self, state, action, reward, next_state, terminal) -> int:
        i = self.head
        self.states[i] = state
        self.next_states[i] = next_state
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminal[i] = terminal
        self.priorities[i] = self.max_priority
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        p = self.priorities[:self.size] ** self.alpha
        return p / p.sum()

    def sample(self, batch: int, rng, beta: float = 0.4):
        if self.size < batch:
            raise DataError(f"replay buffer holds {self.size} transitions, batch needs {batch}")
        p = self.probabilities()
        idx = rng.choice(self.size, size=batch, p=p)
        w = (self.size * p[idx]) ** (-beta)
        w /= w.max()
        data = {"state": self.states[idx], "action": self.actions[idx], "reward": self.rewards[idx],
                "next_state": self.next_states[idx], "terminal": self.terminal[idx]}
        return data, w, idx

    def update_priorities(self, indices, td_abs) -> None:
        new = np.abs(np.asarray(td_abs, dtype=np.float64)) + self.floor
        self.priorities[indices] = new
        self.max_priority = max(self.max_priority, float(new.max()))


# --------------------------------------------------------------------------- schedules

@dataclass
class CurriculumSchedule:
    stages: list[tuple[int, int]]     # (first epoch, n_segment)

    def __post_init__(self):
        self.stages = [(int(e), int(n)) for e, n in self.stages]
        if not self.stages or self.stages[0][0] != 0:
            raise ConfigError("curriculum must start at epoch 0")
        for (e0, n0), (e1, n1) in zip(self.stages, self.stages[1:]):
            if e1 <= e0 or n1 <= n0:
                raise ConfigError(f"curriculum thresholds and n_segment must increase: {self.stages}")

    @classmethod
    def default(cls, ndim=2) -> "CurriculumSchedule":
        levels = [100, 1000, 2000] if ndim == 2 else [100, 1000, 2000, 5000, 10000]
        return cls([(20 * i, n) for i, n in enumerate(levels)])

    def n_segment(self, epoch: int) -> int:
        current = self.stages[0][1]
        for e, n in self.stages:
            if epoch >= e:
                current = n
        return current

    @property
    def final(self) -> int:
        return self.stages[-1][1]

    def scaled(self, factor: float) -> "CurriculumSchedule":
        """Same levels with thresholds multiplied by ``factor`` (kept distinct)."""
        out, last = [], -1
        for e, n in self.stages:
            t = max(last + 1, int(round(e * factor)))
            out.append((t, n))
            last = t
        return CurriculumSchedule(out)

    def __str__(self):
        return " ".join(f"{e}:{n}" for e, n in self.stages)

    @classmethod
    def parse(cls, text: str) -> "CurriculumSchedule":
        try:
            return cls([tuple(int(v) for v in tok.split(":")) for tok in text.split()])
        except ValueError:
            raise ConfigError(f"bad curriculum '{text}', expected 'epoch:n_segment ...'") from None


class TargetSync:
    """Hard-copies the online weights into the target net every ``every`` gradient steps."""

    def __init__(self, every: int = 1200):
        self.every = int(every)
        self.counter = 0
        self.syncs = 0

    def tick(self, online: QNetwork, target: QNetwork) -> bool:
        self.counter += 1
        if self.counter >= self.every:
            target.copy_from(online)
            self.counter = 0
            self.syncs += 1
            return True
        return False


@dataclass
class AgentHyper:
    epochs: int = 100
    gamma: float = 0.9
    lr: float = 5e-5
    weight_decay: float = 1e-2
    batch: int = 32
    buffer_capacity: int = 8000
    alpha: float = 0.6
    beta_start: float = 0.4
    priority_floor: float = 1e-3
    sync_every: int = 1200
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.3
    warmup: int = 500
    train_every: int = 1
    channels: tuple[int, ...] = (16, 32)
    hidden: int = 64

    def validate(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if self.batch < 1 or self.buffer_capacity < self.batch:
            raise ConfigError("buffer capacity must be at least one batch")
        if self.lr <= 0 or self.epochs < 1 or self.sync_every < 1 or self.train_every < 1:
            raise ConfigError("lr, epochs, sync_every and train_every must be positive")
        if not 0 <= self.eps_end <= self.eps_start <= 1 or not 0 < self.eps_fraction <= 1:
            raise ConfigError("epsilon schedule must satisfy 0 <= end <= start <= 1")

    def epsilon(self, progress: float) -> float:
        frac = min(1.0, progress / self.eps_fraction)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def beta(self, progress: float) -> float:
        return self.beta_start + min(1.0, progress) * (1.0 - self.beta_start)


# --------------------------------------------------------------------------- episodes

@dataclass
class TrainItem:
    image: np.ndarray
    box: object
    source: np.ndarray
    name: str = ""


def train_step(qnet: QNetwork, target: QNetwork, buffer: ReplayBuffer, batch: int, opt: AdamW,
               gamma: float, rng, beta: float = 0.4) -> float:
    """One prioritized DDQN update of the online network; priorities of the sampled rows are refreshed."""
    data, weights, idx = buffer.sample(batch, rng, beta)
    loss, td = ddqn_loss(qnet, target, data, weights, gamma)
    opt.step()
    buffer.update_priorities(idx, np.abs(td).mean(axis=1))
    return loss


def run_episode(scene: Scene, classifier, qnet: QNetwork, config: EpisodeConfig, epsilon: float, rng,
                on_step: Callable | None = None, max_steps: int | None = None):
    """Roll out one episode; ``on_step(obs, actions, outcome, next_obs)`` sees every transition."""
    state = reset(scene, classifier, config)
    obs = joint_observation(state)
    outcomes = []
    limit = max_steps if max_steps is not None else 10 * scene.smap.n_regions + 10
    while not state.terminal and state.steps < limit:
        actions = select_actions(qnet, obs, epsilon, rng)
        state, outcome = step(state, actions, classifier)
        next_obs = joint_observation(state)
        if on_step is not None:
            on_step(obs, actions, outcome, next_obs)
        outcomes.append(outcome)
        obs = next_obs
    return state, outcomes


class SceneCache:
    """Memoizes scenes per (item index, n_segment); SLIC is deterministic so reuse is exact."""

    def __init__(self, items: list[TrainItem], config: EpisodeConfig):
        self.items, self.config = items, config
        self._store: dict = {}

    def get(self, i: int, n_segment: int) -> Scene:
        key = (i, n_segment)
        if key not in self._store:
            # drop coarser levels once a finer one is requested, to bound memory
            for k in [k for k in self._store if k[1] < n_segment]:
                del self._store[k]
            it = self.items[i]
            self._store[key] = build_scene(it.image, it.box, it.source, n_segment, self.config)
        return self._store[key]


@dataclass
class TrainResult:
    qnet: QNetwork
    target: QNetwork
    optimizer: AdamW
    epoch_log: list[dict] = field(default_factory=list)
    episode_log: list[dict] = field(default_factory=list)
    grad_steps: int = 0
    env_steps: int = 0


EPOCH_FIELDS = ("epoch", "n_segment", "episodes", "mean_episode_reward", "mean_step_reward",
                "mean_final_sc", "mean_final_nodule_score", "mean_erased_fraction", "flip_rate",
                "mean_loss", "epsilon", "env_steps", "grad_steps", "seconds")
EPISODE_FIELDS = ("epoch", "episode", "image", "n_segment", "steps", "episode_reward",
                  "mean_step_reward", "final_sc", "final_nodule_score", "erased_fraction", "reason",
                  "epsilon")


def train(items: list[TrainItem], classifier, schedule: CurriculumSchedule, hyper: AgentHyper,
          config: EpisodeConfig, seed: int = 0, resume: TrainResult | None = None, start_epoch: int = 0,
          on_epoch: Callable | None = None) -> TrainResult:
    """Progressive-curriculum DDQN training over ``items``.

    Epsilon decays linearly over the first ``eps_fraction`` of all episodes and the
    PER exponent beta anneals to 1 over the whole run.
    """
    hyper.validate()
    config.validate()
    if not items:
        raise DataError("no training images")
    # a resumed run gets its own stream so it does not replay the first epochs' draws
    rng = np.random.default_rng([seed, start_epoch])
    ndim = items[0].image.ndim
    if resume is None:
        qnet = QNetwork(config.k_agents, ndim, config.state_patch, config.history, hyper.channels,
                        hyper.hidden, seed=seed)
        target = qnet.clone()
        opt = AdamW(qnet.nets.values(), lr=hyper.lr, weight_decay=hyper.weight_decay)
        result = TrainResult(qnet, target, opt)
    else:
        result = resume
        qnet, target, opt = result.qnet, result.target, result.optimizer
    buffer = ReplayBuffer(hyper.buffer_capacity, qnet.input_shape, qnet.k, hyper.alpha, hyper.priority_floor)
    sync = TargetSync(hyper.sync_every)
    cache = SceneCache(items, config)
    total_episodes = hyper.epochs * len(items)

    for epoch in range(start_epoch, hyper.epochs):
        t0 = time.process_time()
        n_seg = schedule.n_segment(epoch)
        losses, rows = [], []
        for j, i in enumerate(rng.permutation(len(items))):
            progress = (epoch * len(items) + j) / total_episodes
            eps = hyper.epsilon(progress)
            beta = hyper.beta(progress)
            scene = cache.get(int(i), n_seg)

            def on_step(obs, actions, outcome, next_obs):
                buffer.push(obs, actions, outcome.reward, next_obs, outcome.terminal)
                result.env_steps += 1
                if len(buffer) >= max(hyper.warmup, hyper.batch) and result.env_steps % hyper.train_every == 0:
                    losses.append(train_step(qnet, target, buffer, hyper.batch, opt, hyper.gamma, rng, beta))
                    result.grad_steps += 1
                    sync.tick(qnet, target)

            state, outcomes = run_episode(scene, classifier, qnet, config, eps, rng, on_step)
            rewards = [o.reward for o in outcomes]
            rows.append({
                "epoch": epoch, "episode": epoch * len(items) + j, "image": items[i].name or str(i),
                "n_segment": n_seg, "steps": len(outcomes), "episode_reward": float(np.sum(rewards)),
                "mean_step_reward": float(np.mean(rewards)) if rewards else 0.0,
                "final_sc": state.sc, "final_nodule_score": state.nodule_score,
                "erased_fraction": state.erased_fraction, "reason": state.reason or "step-limit",
                "epsilon": eps,
            })
        result.episode_log.extend(rows)
        summary = {
            "epoch": epoch, "n_segment": n_seg, "episodes": len(rows),
            "mean_episode_reward": float(np.mean([r["episode_reward"] for r in rows])),
            "mean_step_reward": float(np.mean([r["mean_step_reward"] for r in rows])),
            "mean_final_sc": float(np.mean([r["final_sc"] for r in rows])),
            "mean_final_nodule_score": float(np.mean([r["final_nodule_score"] for r in rows])),
            "mean_erased_fraction": float(np.mean([r["erased_fraction"] for r in rows])),
            "flip_rate": float(np.mean([r["reason"] == "score-flip" for r in rows])),
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "epsilon": rows[-1]["epsilon"], "env_steps": result.env_steps,
            "grad_steps": result.grad_steps, "seconds": time.process_time() - t0,
        }
        result.epoch_log.append(summary)
        log.info("epoch %d n_segment %d reward %.3f flip %.2f erased %.3f loss %.4f eps %.3f (%.0fs)",
                 epoch, n_seg, summary["mean_step_reward"], summary["flip_rate"],
                 summary["mean_erased_fraction"], summary["mean_loss"], summary["epsilon"],
                 summary["seconds"])
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result


TRACE_FIELDS = ("step", "actions", "sc", "nodule_score", "wd1", "wd2", "wd3", "csr", "idr1", "idr2",
                "reward", "erased_fraction", "dice", "terminal", "reason")


def infer(qnet: QNetwork, image, box, classifier, n_segment: int, config: EpisodeConfig,
          source=None, gt=None):
    """Greedy rollout; returns (image-sized mask, per-step trace rows, final state).

    With ``gt`` the trace also tracks DICE of the running erased mask.
    """
    from .eraser import generate_candidates, select_source
    from .metrics import dice

    if source is None:
        source = select_source(generate_candidates(image, box), classifier).patch
    scene = build_scene(image, box, source, n_segment, config)
    trace = []

    def on_step(obs, actions, outcome, next_obs):
        row = {"step": len(trace) + 1, "actions": " ".join(map(str, outcome.actions)),
               "sc": outcome.sc, "nodule_score": outcome.nodule_score, "wd1": outcome.wd1,
               "wd2": outcome.wd2, "wd3": outcome.wd3, "csr": outcome.csr, "idr1": outcome.idr1,
               "idr2": outcome.idr2, "reward": outcome.reward, "erased_fraction": outcome.erased_fraction,
               "dice": float("nan"), "terminal": int(outcome.terminal), "reason": outcome.reason or ""}
        trace.append(row)

    rng = np.random.default_rng(0)
    state = reset(scene, classifier, config)
    obs = joint_observation(state)
    limit = 10 * scene.smap.n_regions + 10
    while not state.terminal and state.steps < limit:
        actions = select_actions(qnet, obs, 0.0, rng)
        state, outcome = step(state, actions, classifier)
        next_obs = joint_observation(state)
        on_step(obs, actions, outcome, next_obs)
        if gt is not None:
            trace[-1]["dice"] = dice(extract_mask(state), gt)
        obs = next_obs
    return extract_mask(state), trace, state


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, result: TrainResult, manifest: dict) -> None:
    """Online and target networks plus AdamW moments in one FLNN1 file, and an ASCII run manifest."""
    nets = {f"online.{k}": v for k, v in result.qnet.nets.items()}
    nets.update({f"target.{k}": v for k, v in result.target.nets.items()})
    moments = _moment_nets(result)
    nets.update(moments)
    save_networks(path, nets)
    info = dict(manifest)
    info.update({"k_agents": result.qnet.k, "adam_step": result.optimizer.step_count,
                 "grad_steps": result.grad_steps, "env_steps": result.env_steps})
    with open(f"{path}.manifest", "w") as fh:
        for k, v in info.items():
            fh.write(f"{k} = {v}\n")


def _moment_nets(result: TrainResult) -> dict[str, Sequential]:
    import copy
    out = {}
    moments = iter(zip(result.optimizer.m, result.optimizer.v))
    for name, net in result.qnet.nets.items():
        m_net, v_net = copy.deepcopy(net), copy.deepcopy(net)
        for (_, _, pm), (_, _, pv) in zip(m_net.parameters(), v_net.parameters()):
            m, v = next(moments)
            pm[...] = m
            pv[...] = v
        out[f"adam_m.{name}"] = m_net
        out[f"adam_v.{name}"] = v_net
    return out


def read_manifest(path) -> dict[str, str]:
    info = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                info[k.strip()] = v.strip()
    return info


def load_checkpoint(path, hyper: AgentHyper | None = None) -> tuple[TrainResult, dict]:
    nets = load_networks(path)
    info = read_manifest(f"{path}.manifest")
    k = int(info["k_agents"])

    def pick(prefix):
        return {n.split(".", 1)[1]: v for n, v in nets.items() if n.startswith(prefix + ".")}

    qnet = QNetwork(k, nets=pick("online"))
    target = QNetwork(k, nets=pick("target"))
    hyper = hyper or AgentHyper()
    opt = AdamW(qnet.nets.values(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    m_nets, v_nets = pick("adam_m"), pick("adam_v")
    if m_nets:
        ms = [p for name in qnet.nets for _, _, p in m_nets[name].parameters()]
        vs = [p for name in qnet.nets for _, _, p in v_nets[name].parameters()]
        opt.m, opt.v = [m.copy() for m in ms], [v.copy() for v in vs]
        opt.step_count = int(info.get("adam_step", 0))
    result = TrainResult(qnet, target, opt, grad_steps=int(info.get("grad_steps", 0)),
                         env_steps=int(info.get("env_steps", 0)))
    return result, info


def load_qnet(path) -> QNetwork:
    return load_checkpoint(path)[0].qnet
