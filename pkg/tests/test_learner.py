import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import MeanClassifier
from fdcheck import cache_pattern, check_array
from flipseg.environment import ERASE, PASS, EpisodeConfig
from flipseg.errors import ConfigError, DataError
from flipseg.grid import SyntheticSpec, generate_synthetic
from flipseg.learner import AgentHyper, CurriculumSchedule, QNetwork, ReplayBuffer, TargetSync, \
    TrainItem, ddqn_loss, ddqn_targets, infer, load_checkpoint, save_checkpoint, select_actions, \
    train, train_step
from flipseg.metrics import dice
from flipseg.neural import AdamW


def tiny_qnet(k=2, seed=0, patch=8, history=2):
    return QNetwork(k, 2, patch, history, channels=(3,), hidden=5, seed=seed)


def fix_head(qnet, values):
    """Make every head output the constant Q pair ``values[k]`` regardless of input."""
    for head, v in zip(qnet.heads, values):
        last = head.layers[-1]
        last.params["W"][...] = 0.0
        last.params["b"][...] = v


def random_batch(qnet, n, rng):
    shape = (n,) + qnet.input_shape
    return {"state": rng.random(shape) * 255, "next_state": rng.random(shape) * 255,
            "action": rng.integers(0, 2, (n, qnet.k)), "reward": rng.integers(-3, 4, n).astype(float),
            "terminal": rng.random(n) < 0.3}


# ---------------------------------------------------------------- action selection

def test_greedy_picks_max_and_ties_pass():
    q = tiny_qnet()
    fix_head(q, [(0.2, 0.7), (0.5, 0.5)])
    obs = np.zeros(q.input_shape)
    acts = select_actions(q, obs, 0.0, np.random.default_rng(0))
    assert list(acts) == [ERASE, PASS]


def test_full_exploration_is_uniform():
    q = tiny_qnet()
    fix_head(q, [(0.0, 1.0), (1.0, 0.0)])
    rng = np.random.default_rng(1)
    obs = np.zeros(q.input_shape)
    n = 10_000
    counts = np.zeros(2)
    for _ in range(n // 2):
        counts += select_actions(q, obs, 1.0, rng)
    sigma = np.sqrt(n / 2 * 0.25)
    assert np.all(np.abs(counts - n / 4) < 3 * sigma)


def test_epsilon_out_of_range():
    with pytest.raises(ConfigError):
        select_actions(tiny_qnet(), np.zeros(tiny_qnet().input_shape), 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- DDQN targets and loss

def test_ddqn_target_examples():
    online = np.array([[[0.0, 5.0]]])        # argmax picks action 1
    target = np.array([[[9.0, 2.0]]])        # but the target values action 1 at 2.0
    assert ddqn_targets([1.0], [True], online, target, 0.9)[0, 0] == 1.0
    assert ddqn_targets([1.0], [False], online, target, 0.9)[0, 0] == pytest.approx(2.8)
    assert ddqn_targets([1.0], [False], online, target, 0.0)[0, 0] == 1.0
    with pytest.raises(ConfigError):
        ddqn_targets([1.0], [False], online, target, 1.0)


def test_double_decoupling_on_crafted_nets():
    online, target = tiny_qnet(seed=1), tiny_qnet(seed=2)
    fix_head(online, [(1.0, 3.0), (4.0, 0.0)])   # online prefers erase, pass
    fix_head(target, [(10.0, -1.0), (-2.0, 7.0)])  # target would prefer the opposite
    rng = np.random.default_rng(0)
    batch = random_batch(online, 4, rng)
    batch["terminal"][:] = False
    batch["reward"][:] = 0.0
    y = ddqn_targets(batch["reward"], batch["terminal"], online(batch["next_state"]),
                     target(batch["next_state"]), 0.5)
    assert np.allclose(y[:, 0], 0.5 * -1.0) and np.allclose(y[:, 1], 0.5 * -2.0)


def test_loss_zero_when_targets_match():
    q, t = tiny_qnet(seed=3), tiny_qnet(seed=4)
    rng = np.random.default_rng(2)
    batch = random_batch(q, 6, rng)
    qa = np.take_along_axis(q(batch["state"]), batch["action"][..., None], axis=-1)[..., 0]
    loss, td = ddqn_loss(q, t, batch, np.ones(6), 0.9, targets=qa)
    assert loss == 0.0 and np.all(td == 0)
    assert all(np.all(g == 0) for net in q.nets.values() for g in net.gradients())


def test_loss_is_non_negative():
    q, t = tiny_qnet(seed=5), tiny_qnet(seed=6)
    rng = np.random.default_rng(3)
    for _ in range(5):
        batch = random_batch(q, 5, rng)
        loss, _ = ddqn_loss(q, t, batch, rng.random(5), 0.9, backward=False)
        assert loss >= 0


def test_ddqn_loss_gradient():
    q, t = tiny_qnet(seed=7), tiny_qnet(seed=8)
    rng = np.random.default_rng(4)
    batch = random_batch(q, 4, rng)
    weights = rng.random(4) + 0.5
    targets = ddqn_targets(batch["reward"], batch["terminal"], q(batch["next_state"]),
                           t(batch["next_state"]), 0.9)
    ddqn_loss(q, t, batch, weights, 0.9, targets=targets)

    def f():
        return ddqn_loss(q, t, batch, weights, 0.9, backward=False, targets=targets)[0]

    def pattern():
        _, (tcache, hcaches) = q.forward(batch["state"])
        out = cache_pattern(q.trunk, tcache)
        for h, c in zip(q.heads, hcaches):
            out += cache_pattern(h, c)
        return out

    worst = 0.0
    for net in q.nets.values():
        for i, name, p in net.parameters():
            worst = max(worst, check_array(f, p, net.layers[i].grads[name], rng, n_probe=8, pattern=pattern))
    assert worst < 1e-4


def test_train_step_leaves_target_untouched():
    q = tiny_qnet(seed=9)
    t = q.clone()
    before = [p.copy() for net in t.nets.values() for _, _, p in net.parameters()]
    buf = ReplayBuffer(50, q.input_shape, q.k)
    rng = np.random.default_rng(5)
    b = random_batch(q, 20, rng)
    for i in range(20):
        buf.push(b["state"][i], b["action"][i], b["reward"][i], b["next_state"][i], b["terminal"][i])
    opt = AdamW(q.nets.values(), lr=1e-3)
    loss = train_step(q, t, buf, 8, opt, 0.9, rng)
    assert loss >= 0
    after = [p for net in t.nets.values() for _, _, p in net.parameters()]
    assert all(np.array_equal(x, y) for x, y in zip(before, after))
    assert any(not np.array_equal(x, y) for x, y in
               zip(before, [p for net in q.nets.values() for _, _, p in net.parameters()]))


# ---------------------------------------------------------------- replay buffer

def filled_buffer(priorities, alpha=0.6):
    buf = ReplayBuffer(len(priorities), (1,), 1, alpha=alpha)
    for _ in priorities:
        buf.push([0.0], [0], 0.0, [0.0], False)
    buf.priorities[:len(priorities)] = priorities
    return buf


def test_equal_priorities_are_uniform():
    buf = filled_buffer([2.0] * 5)
    assert np.allclose(buf.probabilities(), 0.2)
    _, w, _ = buf.sample(5, np.random.default_rng(0), beta=0.7)
    assert np.all(w == 1.0)


def test_priority_closed_form():
    p = filled_buffer([1.0, 3.0]).probabilities()
    assert p[0] == pytest.approx(1 / (1 + 3 ** 0.6))
    assert p == pytest.approx([0.341, 0.659], abs=5e-4)


def test_importance_weights_closed_form():
    buf = filled_buffer([1.0, 3.0, 0.5, 2.0])
    p = buf.probabilities()
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, w, idx = buf.sample(4, rng, beta=0.4)
        expect = (4 * p[idx]) ** -0.4
        assert np.allclose(w, expect / expect.max())


def test_sampling_frequencies_chi_square():
    rng = np.random.default_rng(2)
    prios = np.repeat([0.1, 1.0, 2.5, 4.0, 0.7, 3.3], 200)
    buf = filled_buffer(prios)
    counts = np.zeros(len(prios))
    for _ in range(100):
        _, _, idx = buf.sample(1000, rng)
        counts += np.bincount(idx, minlength=len(prios))
    expected = prios ** 0.6 / np.sum(prios ** 0.6) * counts.sum()
    assert chisquare(counts, expected).pvalue > 0.01


def test_priority_update_touches_only_sampled():
    buf = filled_buffer([1.0] * 8)
    _, _, idx = buf.sample(3, np.random.default_rng(3))
    td = np.array([0.5, -2.0, 0.0])
    before = buf.priorities.copy()
    buf.update_priorities(idx, td)
    expect = before.copy()
    expect[idx] = np.abs(td) + 1e-3
    assert np.array_equal(buf.priorities, expect)


def test_new_transitions_get_max_priority():
    buf = ReplayBuffer(10, (1,), 1)
    buf.push([0.0], [0], 0.0, [0.0], False)
    buf.update_priorities([0], [5.0])
    buf.push([0.0], [0], 0.0, [0.0], False)
    assert buf.priorities[1] == pytest.approx(5.0 + 1e-3)


def test_eviction_is_oldest_first():
    buf = ReplayBuffer(3, (1,), 1)
    for i in range(5):
        buf.push([float(i)], [0], float(i), [0.0], False)
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]


def test_underfull_sample_is_error():
    buf = ReplayBuffer(10, (1,), 1)
    buf.push([0.0], [0], 0.0, [0.0], False)
    with pytest.raises(DataError):
        buf.sample(2, np.random.default_rng(0))


# ---------------------------------------------------------------- target sync

def test_target_sync_schedule():
    q, t = tiny_qnet(seed=1), tiny_qnet(seed=2)
    sync = TargetSync(3)
    x = np.random.default_rng(0).random((2,) + q.input_shape) * 255
    assert not sync.tick(q, t) and not sync.tick(q, t)
    assert not np.array_equal(q(x), t(x))
    assert sync.tick(q, t)
    assert np.array_equal(q(x), t(x)) and sync.counter == 0
    for net in q.nets.values():
        for _, _, p in net.parameters():
            p += 1.0
    assert not sync.tick(q, t) and not np.array_equal(q(x), t(x))


# ---------------------------------------------------------------- curriculum and schedules

def test_curriculum_defaults():
    s = CurriculumSchedule.default(2)
    assert [s.n_segment(e) for e in (0, 19, 20, 39, 40, 99)] == [100, 100, 1000, 1000, 2000, 2000]
    s3 = CurriculumSchedule.default(3)
    assert str(s3) == "0:100 20:1000 40:2000 60:5000 80:10000"
    levels = [s3.n_segment(e) for e in range(150)]
    assert all(a <= b for a, b in zip(levels, levels[1:]))


def test_curriculum_parse_and_scale():
    s = CurriculumSchedule.parse("0:100 20:1000 40:2000")
    assert str(s.scaled(0.3)) == "0:100 6:1000 12:2000"
    assert str(CurriculumSchedule.parse(str(s))) == str(s)
    for bad in ("5:100", "0:100 10:50", "0:100 0:200", "zero:100"):
        with pytest.raises(ConfigError):
            CurriculumSchedule.parse(bad)


def test_epsilon_and_beta_schedules():
    h = AgentHyper()
    assert h.epsilon(0.0) == 1.0
    assert h.epsilon(0.15) == pytest.approx(0.55)
    assert h.epsilon(0.3) == pytest.approx(0.1) and h.epsilon(0.9) == pytest.approx(0.1)
    assert h.beta(0.0) == 0.4 and h.beta(0.5) == pytest.approx(0.7) and h.beta(1.0) == 1.0


# ---------------------------------------------------------------- training driver

@pytest.fixture(scope="module")
def items():
    out = []
    for i in range(3):
        image, _, box = generate_synthetic(SyntheticSpec(dims=(64, 64), radius=(8, 11), seed=300 + i))
        out.append(TrainItem(image, box, np.full(box.extent, 150.0), f"img{i}"))
    return out


def tiny_hyper(epochs=3):
    return AgentHyper(epochs=epochs, batch=8, buffer_capacity=200, warmup=16, sync_every=10,
                      channels=(4,), hidden=8, lr=1e-3)


def tiny_config():
    return EpisodeConfig(k_agents=2, n_segment=20, target_side=40)


def test_training_log_shape_and_curriculum(items):
    schedule = CurriculumSchedule([(0, 20), (2, 40)])
    res = train(items, MeanClassifier(), schedule, tiny_hyper(), tiny_config(), seed=1)
    assert len(res.episode_log) == 3 * len(items)
    assert [r["n_segment"] for r in res.epoch_log] == [20, 20, 40]
    assert [r["epoch"] for r in res.epoch_log] == [0, 1, 2]
    assert res.grad_steps > 0 and res.env_steps >= res.grad_steps
    eps = [r["epsilon"] for r in res.episode_log]
    assert eps[0] == 1.0 and all(a >= b for a, b in zip(eps, eps[1:]))


def test_training_is_deterministic(items):
    schedule = CurriculumSchedule([(0, 20)])
    a = train(items, MeanClassifier(), schedule, tiny_hyper(1), tiny_config(), seed=4)
    b = train(items, MeanClassifier(), schedule, tiny_hyper(1), tiny_config(), seed=4)
    strip = lambda row: {k: v for k, v in row.items() if k != "seconds"}  # noqa: E731
    assert strip(a.epoch_log[0]) == strip(b.epoch_log[0])
    x = np.random.default_rng(0).random((2,) + a.qnet.input_shape) * 255
    assert np.array_equal(a.qnet(x), b.qnet(x))


def test_checkpoint_round_trip_and_resume(items, tmp_path):
    schedule = CurriculumSchedule([(0, 20)])
    hyper = tiny_hyper(2)
    res = train(items, MeanClassifier(), schedule, hyper, tiny_config(), seed=2)
    save_checkpoint(tmp_path / "ck.flnn", res, {"seed": 2, "completed_epochs": 2})
    back, info = load_checkpoint(tmp_path / "ck.flnn", hyper)
    x = np.random.default_rng(1).random((3,) + res.qnet.input_shape) * 255
    assert np.array_equal(back.qnet(x), res.qnet(x))
    assert np.array_equal(back.target(x), res.target(x))
    assert all(np.array_equal(a, b) for a, b in zip(back.optimizer.m, res.optimizer.m))
    assert back.optimizer.step_count == res.optimizer.step_count
    assert info["completed_epochs"] == "2" and int(info["k_agents"]) == 2
    more = train(items, MeanClassifier(), schedule, tiny_hyper(4), tiny_config(), seed=2,
                 resume=back, start_epoch=2)
    assert [r["epoch"] for r in more.epoch_log] == [2, 3]
    assert more.env_steps > res.env_steps


# ---------------------------------------------------------------- inference

class DarkFractionClassifier:
    """Scores a two-tone patch by the share of dark cells left: nodule if any noticeable dark area remains."""

    def score(self, patch):
        dark = float(np.mean(np.asarray(patch) < 100))
        nodule = min(1.0, dark / 0.02)
        return np.array([nodule, 1 - nodule])

    def score_batch(self, patches):
        return np.array([self.score(p) for p in patches])


def two_tone_case():
    spec = SyntheticSpec(dims=(80, 80), radius=(12, 14), speckle=0.0, texture=0.0, irregularity=0.0,
                         fg_mean=(50.0, 50.0), bg_mean=(150.0, 150.0), seed=5)
    return generate_synthetic(spec)


def test_infer_on_two_tone_image():
    image, mask, box = two_tone_case()
    q = tiny_qnet(k=2, patch=16, history=3)
    fix_head(q, [(0.0, 1.0), (0.0, 1.0)])         # always erase: the inner-to-outer walk does the rest
    config = EpisodeConfig(k_agents=2, n_segment=200)
    pred, trace, state = infer(q, image, box, DarkFractionClassifier(), 200, config, gt=mask)
    assert state.reason == "score-flip"
    assert trace[-1]["nodule_score"] < 0.01 and trace[-1]["reason"] == "score-flip"
    assert dice(pred, mask) > 0.9
    outside = pred.copy()
    outside[box.slices] = False
    assert not outside.any()
    again, trace2, _ = infer(q, image, box, DarkFractionClassifier(), 200, config, gt=mask)
    assert np.array_equal(pred, again) and repr(trace) == repr(trace2)
