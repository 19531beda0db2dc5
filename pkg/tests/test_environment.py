import numpy as np
import pytest

from conftest import MeanClassifier
from flipseg.environment import ERASE, PASS, EpisodeConfig, _patch, build_scene, csr_reward, \
    extract_mask, idr1_reward, idr2_reward, joint_observation, normalized_mask, observe, reset, step
from flipseg.errors import ConfigError, StateError
from flipseg.grid import SyntheticSpec, generate_synthetic
from flipseg.metrics import wasserstein_1d


class ConstantClassifier:
    """Never flips: nodule probability fixed at 0.9."""

    def score(self, patch):
        return np.array([0.9, 0.1])


@pytest.fixture(scope="module")
def case():
    image, mask, box = generate_synthetic(SyntheticSpec(dims=(96, 96), radius=(10, 14), seed=21))
    return image, mask, box


def make_scene(case, n_segment=60, k=2, **kw):
    image, _, box = case
    config = EpisodeConfig(k_agents=k, n_segment=n_segment, **kw)
    source = np.full(box.extent, 150.0)
    return build_scene(image, box, source, n_segment, config), config


# ---------------------------------------------------------------- reward pieces

def test_csr_examples():
    assert csr_reward(0.30, 0.55) == 1
    assert csr_reward(0.55, 0.30) == -1
    assert csr_reward(0.4, 0.4) == 0


def test_idr1_examples():
    assert idr1_reward(10, 25) == 1
    assert idr1_reward(25, 25) == 1
    assert idr1_reward(30, 25) == -1
    assert idr1_reward(0, 25) == 0


def test_idr2_examples():
    assert idr2_reward(3, 5) == 1
    assert idr2_reward(4, 4) == 0
    assert idr2_reward(5, 3) == -1


def test_config_validation():
    for bad in (dict(k_agents=0), dict(history=0), dict(theta=0), dict(stop_score=1.0)):
        with pytest.raises(ConfigError):
            EpisodeConfig(**bad).validate()


# ---------------------------------------------------------------- reset / observe

def test_reset_state(case):
    scene, config = make_scene(case)
    state = reset(scene, MeanClassifier(), config)
    assert joint_observation(state).shape == (3 * 2, 16, 16)
    assert state.fg_size == 0 and state.bg_size == scene.original.size
    assert not state.erased.any()
    first = observe(state, 0)
    assert np.array_equal(first[0], first[1]) and np.array_equal(first[1], first[2])
    for a in range(2):
        assert state.cursor(a) == scene.agent_regions[a][0]
    assert state.sc == pytest.approx(MeanClassifier().score(scene.original)[1])


def test_reset_is_deterministic(case):
    a = reset(make_scene(case)[0], MeanClassifier())
    b = reset(make_scene(case)[0], MeanClassifier())
    assert np.array_equal(joint_observation(a), joint_observation(b))
    assert np.array_equal(a.scene.smap.labels, b.scene.smap.labels)


def test_patch_padding_and_constant_image():
    img = np.full((30, 30), 7.0)
    assert np.all(_patch(img, (15, 15), 16) == 7.0)
    corner = _patch(img, (0, 0), 16)
    assert np.all(corner[:8, :] == 0) and np.all(corner[:, :8] == 0)
    assert np.all(corner[8:, 8:] == 7.0)


def test_history_is_a_queue(case):
    scene, config = make_scene(case)
    state = reset(scene, MeanClassifier(), config)
    frames = [list(observe(state, a)) for a in range(2)]
    for _ in range(4):
        state, _ = step(state, (ERASE, PASS), MeanClassifier())
        for a in range(2):
            center = scene.smap.centroids[state.cursor(a)]
            frames[a] = frames[a][1:] + [_patch(state.image, center, 16)]
            assert np.array_equal(observe(state, a), np.stack(frames[a]))


# ---------------------------------------------------------------- step

def test_all_pass_is_a_no_op(case):
    scene, config = make_scene(case)
    clf = MeanClassifier()
    state = reset(scene, clf, config)
    before = state.image.copy()
    state, out = step(state, (PASS, PASS), clf)
    assert np.array_equal(state.image, before)
    assert (out.csr, out.idr1, out.idr2, out.reward) == (0, 0, 0, 0)
    assert not out.terminal and out.reason is None


def test_step_against_recomputed_samples(case):
    scene, config = make_scene(case)
    clf = MeanClassifier()
    state = reset(scene, clf, config)
    rng = np.random.default_rng(5)
    erased_prev = np.zeros(scene.original.shape, bool)
    sc_prev = state.sc
    for t in range(25):
        if state.terminal:
            break
        targets = [state.cursor(a) for a in range(state.k)]
        acts = tuple(int(x) for x in rng.integers(0, 2, state.k))
        state, out = step(state, acts, clf)
        erased_now = erased_prev.copy()
        for a, r in zip(acts, targets):
            if a == ERASE:
                erased_now |= scene.smap.labels == r
        assert np.array_equal(normalized_mask(state), erased_now)
        assert state.fg_size + state.bg_size == scene.original.size
        assert np.all(erased_now >= erased_prev)        # erasing is monotone
        # image: fills where erased, original elsewhere
        expect = np.where(erased_now, scene.source, scene.original)
        assert np.array_equal(state.image, expect)
        # rewards recomputed from raw samples
        fg_prev, fg = scene.original[erased_prev], scene.original[erased_now]
        bg_prev, bg = scene.original[~erased_prev], scene.original[~erased_now]
        wd2 = wasserstein_1d(bg_prev, fg_prev) if fg_prev.size and bg_prev.size else 0.0
        wd3 = wasserstein_1d(bg, fg) if fg.size and bg.size else 0.0
        assert out.wd2 == pytest.approx(wd2, abs=1e-9)
        assert out.wd3 == pytest.approx(wd3, abs=1e-9)
        sc = clf.score(expect)[1]
        assert out.sc == pytest.approx(sc)
        assert out.csr == int(np.sign(sc - sc_prev))
        assert out.idr2 == int(np.sign(round(wd3 - wd2, 9)))
        if fg_prev.size and fg.size > fg_prev.size:
            wd1 = wasserstein_1d(fg_prev, fg)
            assert out.wd1 == pytest.approx(wd1, abs=1e-9)
            assert out.idr1 == (0 if wd1 == 0 else (1 if wd1 <= 25 else -1))
        elif fg.size == fg_prev.size:
            assert out.idr1 == 0
        assert out.reward == out.csr + out.idr1 + out.idr2
        assert all(v in (-1, 0, 1) for v in (out.csr, out.idr1, out.idr2))
        assert out.rewards == [out.reward] * state.k
        erased_prev, sc_prev = erased_now, sc


def test_first_erase_rewards_separation(case):
    scene, config = make_scene(case)
    state = reset(scene, MeanClassifier(), config)
    _, out = step(state, (ERASE, PASS), MeanClassifier())
    assert out.idr1 == 0 and out.wd2 == 0.0
    assert out.idr2 == (1 if out.wd3 > 0 else 0)


def test_score_flip_terminates(case):
    scene, config = make_scene(case)
    clf = MeanClassifier()
    state = reset(scene, clf, config)
    while not state.terminal:
        state, out = step(state, (ERASE, ERASE), clf)
    assert out.reason == "score-flip"
    assert out.nodule_score < config.stop_score
    with pytest.raises(StateError):
        step(state, (PASS, PASS), clf)


def test_exhausted_when_everything_erased(case):
    scene, config = make_scene(case, n_segment=30)
    state = reset(scene, ConstantClassifier(), config)
    while not state.terminal:
        state, out = step(state, (ERASE, ERASE), ConstantClassifier())
    assert out.reason == "exhausted"
    assert state.erased.all()
    mask = extract_mask(state)
    box = scene.box
    assert mask.sum() == box.size and mask[box.slices].all()


def test_traversal_limit_after_two_passes(case):
    scene, config = make_scene(case, n_segment=40)
    state = reset(scene, ConstantClassifier(), config)
    n = 0
    while not state.terminal:
        state, out = step(state, (PASS, PASS), ConstantClassifier())
        n += 1
    assert out.reason == "traversal-limit"
    assert n == 2 * max(len(p) for p in scene.agent_regions)
    assert extract_mask(state).sum() == 0


def test_second_pass_skips_erased_regions(case):
    scene, config = make_scene(case, n_segment=40, k=1)
    state = reset(scene, ConstantClassifier(), config)
    order = list(scene.agent_regions[0])
    erase_first = set(order[::3])
    visited = []
    while not state.terminal:
        r = state.cursor(0)
        visited.append(r)
        state, _ = step(state, (ERASE if (r in erase_first and len(visited) <= len(order)) else PASS,),
                        ConstantClassifier())
    second = visited[len(order):]
    assert second == [r for r in order if r not in erase_first]


def test_wrong_action_count(case):
    scene, config = make_scene(case)
    state = reset(scene, MeanClassifier(), config)
    with pytest.raises(ConfigError):
        step(state, (ERASE,), MeanClassifier())


def test_action_script_is_deterministic(case):
    script = np.random.default_rng(8).integers(0, 2, (30, 2))

    def run():
        scene, config = make_scene(case)
        state = reset(scene, MeanClassifier(), config)
        outs = []
        for acts in script:
            if state.terminal:
                break
            state, out = step(state, acts, MeanClassifier())
            outs.append((out.reward, out.sc, out.wd3))
        return outs, extract_mask(state)

    (a, ma), (b, mb) = run(), run()
    assert a == b and np.array_equal(ma, mb)


# ---------------------------------------------------------------- masks

def test_mask_cell_count_matches_regions(case):
    scene, config = make_scene(case)
    state = reset(scene, MeanClassifier(), config)
    erased = []
    for _ in range(6):
        erased.append(state.cursor(0))
        state, _ = step(state, (ERASE, PASS), MeanClassifier())
    assert normalized_mask(state).sum() == sum(scene.smap.sizes[r] for r in erased)
    mask = extract_mask(state)
    assert mask.shape == case[0].shape
    outside = mask.copy()
    outside[scene.box.slices] = False
    assert not outside.any()


def test_3d_scene_observation_shape():
    image, _, box = generate_synthetic(SyntheticSpec(dims=(40, 40, 40), radius=(8, 10), seed=3))
    config = EpisodeConfig(k_agents=4, n_segment=50, target_side=24)
    scene = build_scene(image, box, np.full(box.extent, 150.0), 50, config)
    state = reset(scene, MeanClassifier(), config)
    assert joint_observation(state).shape == (12, 16, 16, 16)
    state, out = step(state, (ERASE, PASS, ERASE, PASS), MeanClassifier())
    assert state.fg_size + state.bg_size == scene.original.size
    assert extract_mask(state).shape == image.shape
