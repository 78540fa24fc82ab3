import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from kanwm.env import (
    MAX_STEPS, DotReacher, DotReacherState, Transition, dot_reacher_reset, dot_reacher_step, oracle_return,
    render_observation, run_episode, scripted_action,
)
from kanwm.replay import FULL_SCALE_CAPACITY, EpisodeBuffer, NotReadyError, dump_episode, load_episode


def test_step_examples():
    s, tr = dot_reacher_step(DotReacherState((0.5, 0.5), (0.5, 0.5)), np.zeros(2))
    assert tr.reward == 1.0 and tr.cont == 0.0
    _, tr = dot_reacher_step(DotReacherState((0.0, 0.0), (1.0, 1.0)), np.zeros(2))
    assert tr.reward == 0.0 and tr.cont == 1.0
    start = DotReacherState((0.2, 0.3), (0.9, 0.9), step=4)
    s, _ = dot_reacher_step(start, np.zeros(2))
    assert s.agent == start.agent and s.step == 5


def test_actions_are_clipped_and_positions_stay_in_square():
    s, tr = dot_reacher_step(DotReacherState((0.98, 0.01), (0.1, 0.9)), np.array([5.0, -3.0]))
    assert s.agent == (1.0, 0.0)
    np.testing.assert_array_equal(tr.action, [1.0, -1.0])


@settings(max_examples=60, deadline=None)
@given(ax=st.floats(0, 1), ay=st.floats(0, 1), tx=st.floats(0, 1), ty=st.floats(0, 1),
       a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_reward_bounds(ax, ay, tx, ty, a):
    s, tr = dot_reacher_step(DotReacherState((ax, ay), (tx, ty)), np.array(a))
    assert 0.0 <= tr.reward <= 1.0
    assert all(0.0 <= p <= 1.0 for p in s.agent)
    if tr.cont == 0.0 and s.step < MAX_STEPS:
        assert tr.reward == 1.0


def test_episode_cap():
    s = DotReacherState((0.0, 0.0), (1.0, 1.0), step=MAX_STEPS - 1)
    _, tr = dot_reacher_step(s, np.zeros(2))
    assert tr.cont == 0.0
    length = run_episode(lambda *_: np.zeros(2), np.random.default_rng(0))[1]
    assert length == MAX_STEPS


def test_render_examples():
    state = DotReacherState((0.5, 0.25), (0.9, 0.9))
    img = render_observation(state)
    assert img.shape == (16, 16, 3)
    r, c = round(0.25 * 14), round(0.5 * 14)
    np.testing.assert_array_equal(img[r:r + 2, c:c + 2, 0], 1.0)
    assert img[..., 0].sum() == 4 and img[..., 1].sum() == 4 and not img[..., 2].any()
    assert img.min() >= 0 and img.max() <= 1
    np.testing.assert_array_equal(img, render_observation(state))


def test_reset_marks_first(rng):
    state, tr = dot_reacher_reset(rng)
    assert tr.is_first == 1.0 and tr.cont == 1.0 and state.step == 0
    env = DotReacher(0)
    with pytest.raises(RuntimeError):
        env.step(np.zeros(2))
    assert env.reset().is_first == 1.0
    assert env.step(np.ones(2)).is_first == 0.0


def test_scripted_oracle_is_fast(rng):
    for _ in range(200):
        _, steps = run_episode(lambda s, _: scripted_action(s), rng)
        assert steps <= 18
    ret = oracle_return(episodes=50)
    assert 0 < ret < 18


def _transition(i, first=0.0):
    return Transition(np.full((16, 16, 3), i / 1000, dtype=np.float32), np.array([i, -i], float),
                      float(i), 1.0, first)


def test_buffer_shapes_and_not_ready(rng):
    buf = EpisodeBuffer(capacity=200)
    for i in range(63):
        buf.add(_transition(i))
    with pytest.raises(NotReadyError):
        buf.sample(16, 64, rng)
    buf.add(_transition(63))
    batch = buf.sample(16, 64, rng)
    assert batch["obs"].shape == (16, 64, 16, 16, 3)
    assert batch["action"].shape == (16, 64, 2)
    assert batch["reward"].shape == batch["is_first"].shape == (16, 64)
    assert FULL_SCALE_CAPACITY == 5_000_000


def test_buffer_windows_are_contiguous_and_skip_seam(rng):
    buf = EpisodeBuffer(capacity=50)
    for i in range(130):
        buf.add(_transition(i))
    batch = buf.sample(200, 10, rng)
    r = batch["reward"]
    np.testing.assert_array_equal(np.diff(r, axis=1), 1.0)
    assert r.min() >= 80 and r.max() <= 129


def test_buffer_round_trip_is_exact(rng):
    buf = EpisodeBuffer(capacity=10)
    trs = [_transition(i, first=float(i == 0)) for i in range(10)]
    for tr in trs:
        buf.add(tr)
    batch = buf.sample(1, 10, rng)
    for t, tr in enumerate(trs):
        assert batch["obs"][0, t].tobytes() == tr.obs.tobytes()
        np.testing.assert_array_equal(batch["action"][0, t], tr.action)
        assert batch["is_first"][0, t] == tr.is_first


def test_sampled_batches_are_copies(rng):
    buf = EpisodeBuffer(capacity=10)
    for i in range(10):
        buf.add(_transition(i))
    b = buf.sample(1, 5, rng)
    b["reward"][:] = -1
    assert buf.sample(4, 10, rng)["reward"].min() == 0


def test_start_positions_are_uniform():
    buf = EpisodeBuffer(capacity=1000, obs_shape=(1,), action_dim=1)
    for i in range(1000):
        buf.add(Transition(np.zeros(1, np.float32), np.zeros(1), 0.0, 1.0, 0.0))
    starts = buf.sample(10_000, 64, np.random.default_rng(5))["start"]
    counts = np.bincount(starts, minlength=1000 - 64 + 1)
    assert len(counts) == 937
    assert chisquare(counts).pvalue > 0.01


def test_concurrent_writer_and_reader():
    buf = EpisodeBuffer(capacity=500, obs_shape=(1,), action_dim=1)
    for i in range(20):
        buf.add(Transition(np.zeros(1, np.float32), np.zeros(1), float(i), 1.0, 0.0))
    errors = []

    def writer():
        for i in range(20, 2000):
            buf.add(Transition(np.zeros(1, np.float32), np.zeros(1), float(i), 1.0, 0.0))

    def reader():
        r = np.random.default_rng(0)
        for _ in range(300):
            w = buf.sample(4, 8, r)["reward"]
            if not np.all(np.diff(w, axis=1) == 1):
                errors.append(w)
    threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_episode_dump_round_trip(tmp_path, rng):
    env = DotReacher(rng)
    trs = [env.reset()] + [env.step(rng.uniform(-1, 1, 2)) for _ in range(5)]
    dump_episode(tmp_path, trs, meta={"seed": 1})
    back = load_episode(tmp_path)
    assert len(back) == 6
    for a, b in zip(trs, back):
        np.testing.assert_array_equal(a.obs, b.obs)
        assert a.is_first == b.is_first and a.cont == b.cont
        assert b.reward == pytest.approx(a.reward, rel=1e-6)
    with pytest.raises(ValueError):
        EpisodeBuffer(capacity=0)
    assert math.isfinite(back[-1].reward)
