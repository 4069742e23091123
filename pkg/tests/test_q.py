"""Q-learning tests: update rule, action selection, rate decay, table
persistence, and the training loop end to end."""

import math
import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from carpark.config import config_from_mapping
from carpark.env import ParkingEnv
from carpark.metrics import read_run_meta, read_store
from carpark.qlearning import (
    MODEL_BASENAME,
    QTABLE_MAGIC,
    QSchedule,
    QTable,
    evaluate_q,
    linear_decay,
    q_update,
    select_action,
    train_q,
)

BASIC = {"_numParkedCars": 0, "_numAgents": 1}


def basic_cfg(**overrides):
    m = dict(BASIC)
    m.update(overrides)
    return config_from_mapping(m)


# -------------------------------------------------------------- update rule


def test_update_from_zero_terminal():
    t = QTable((4,), (3,))
    # (1 - 0.1) * 0 + 0.1 * (10 + gamma * 0)
    assert q_update(t, 2, 1, 10.0, None, 0.1, 0.9) == pytest.approx(1.0)
    assert t.values[2, 1] == pytest.approx(1.0)


def test_update_full_rate_no_discount():
    t = QTable((4,), (3,))
    t.values[:] = 99.0
    assert q_update(t, 0, 0, -10.0, 3, 1.0, 0.0) == pytest.approx(-10.0)


def test_update_blends_bootstrap():
    t = QTable((4,), (3,))
    t.values[1, 2] = 2.0
    t.values[3] = [0.0, 4.0, -1.0]
    # 0.5 * 2 + 0.5 * (1 + 0.9 * 4) = 3.3
    assert q_update(t, 1, 2, 1.0, 3, 0.5, 0.9) == pytest.approx(3.3)


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_update_rejects_non_finite_reward(bad):
    t = QTable((2,), (2,))
    with pytest.raises(ValueError):
        q_update(t, 0, 0, bad, None, 0.5, 0.9)


@given(s=st.integers(0, 5), a=st.integers(0, 3),
       r=st.floats(-20, 20), alpha=st.floats(0.01, 1.0),
       terminal=st.booleans())
@settings(max_examples=60)
def test_update_touches_one_entry(s, a, r, alpha, terminal):
    rng = np.random.default_rng(1)
    t = QTable((6,), (4,))
    t.values[:] = rng.uniform(-5, 5, size=t.values.shape)
    before = t.values.copy()
    s_next = None if terminal else (s + 1) % 6
    q_update(t, s, a, r, s_next, alpha, 0.9)
    mask = np.ones_like(before, dtype=bool)
    mask[s, a] = False
    assert (t.values[mask] == before[mask]).all()


# ---------------------------------------------------------- action selection


class _NoDraws:
    """Fails the test if the selector consults the rng."""

    def random(self):
        raise AssertionError("rng consulted at epsilon 0")

    def randrange(self, n):
        raise AssertionError("rng consulted at epsilon 0")


def test_greedy_picks_unique_max():
    t = QTable((2,), (3, 2))
    t.values[1] = [0.0, -1.0, 2.0, 7.0, 1.0, 3.0]
    assert select_action(t, 1, 0.0, _NoDraws()) == 3


def test_greedy_tie_breaks_to_lowest_index():
    t = QTable((2,), (3, 2))
    assert select_action(t, 0, 0.0, _NoDraws()) == 0


def test_full_exploration_is_uniform():
    t = QTable((1,), (3, 3))
    rng = random.Random(42)
    draws = 10_000
    counts = [0] * 9
    for _ in range(draws):
        counts[select_action(t, 0, 1.0, rng)] += 1
    expected = draws / 9
    stat = sum((c - expected) ** 2 / expected for c in counts)
    assert stat < chi2.ppf(0.999, 8)


def test_exploration_rate_zero_draws_nothing():
    t = QTable((2,), (4,))
    # shared-rng determinism depends on greedy selection being draw-free
    for s in range(2):
        select_action(t, s, 0.0, _NoDraws())


# -------------------------------------------------------------------- decay


def test_decay_midpoint():
    assert linear_decay(0.3, 0.0, 1000, 2000) == pytest.approx(0.15)


def test_decay_clamps_after_span():
    assert linear_decay(0.3, 0.0, 2000, 2000) == 0.0
    assert linear_decay(0.3, 0.0, 5000, 2000) == 0.0


def test_decay_with_floor():
    assert linear_decay(0.3, 0.1, 500, 2000) == pytest.approx(0.25)


def test_decay_rejects_empty_span():
    with pytest.raises(ValueError):
        linear_decay(0.3, 0.0, 10, 0)


def test_schedule_rates():
    sched = QSchedule(alpha=0.1, gamma=0.9, epsilon=0.3, train_episodes=3000,
                      eval_episodes=500, decay_episodes=2000)
    assert sched.epsilon_at(0) == pytest.approx(0.3)
    assert sched.epsilon_at(1000) == pytest.approx(0.15)
    assert sched.epsilon_at(2500) == 0.0
    # alpha stays constant without a floor
    assert sched.alpha_at(0) == sched.alpha_at(2999) == 0.1
    assert sched.total_episodes == 3500


def test_schedule_alpha_decay():
    sched = QSchedule(alpha=0.2, gamma=0.9, epsilon=0.3, train_episodes=100,
                      alpha_min=0.0)
    assert sched.alpha_at(50) == pytest.approx(0.1)
    assert sched.alpha_at(100) == 0.0


@pytest.mark.parametrize("kwargs", [
    {"alpha": 0.0},
    {"alpha": 1.5},
    {"epsilon": 1.0},
    {"epsilon": -0.1},
    {"gamma": 1.1},
    {"train_episodes": -1},
    {"eval_episodes": -5},
    {"alpha_min": 0.5},
    {"eps_min": 0.4},
    {"decay_episodes": 0},
    {"decay_episodes": 200},
])
def test_schedule_rejects_bad_values(kwargs):
    base = {"alpha": 0.1, "gamma": 0.9, "epsilon": 0.3,
            "train_episodes": 100}
    base.update(kwargs)
    with pytest.raises(ValueError):
        QSchedule(**base)


# -------------------------------------------------------------- persistence


def test_table_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    t = QTable((3, 8), (3, 3))
    t.values[:] = rng.uniform(-10, 10, size=t.values.shape)
    path = str(tmp_path / "t.qtable")
    t.save(path)
    loaded = QTable.load(path)
    assert loaded.state_sizes == (3, 8)
    assert loaded.action_sizes == (3, 3)
    assert loaded.values.tobytes() == t.values.tobytes()


def test_table_file_layout(tmp_path):
    # layout check against independently assembled bytes
    blob = (QTABLE_MAGIC + b"\x01" + struct.pack("<II", 1, 1)
            + struct.pack("<I", 1) + struct.pack("<I", 1)
            + struct.pack("<d", 2.5))
    path = tmp_path / "one.qtable"
    path.write_bytes(blob)
    t = QTable.load(str(path))
    assert t.values.tolist() == [[2.5]]

    t.save(str(path))
    assert path.read_bytes() == blob


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],                  # wrong magic
    lambda b: b[:4] + b"\x07" + b[5:],          # unknown version
    lambda b: b[:10],                           # truncated header
    lambda b: b[:-4],                           # truncated payload
])
def test_table_load_rejects_corrupt_files(tmp_path, mangle):
    t = QTable((2, 2), (3,))
    path = tmp_path / "t.qtable"
    t.save(str(path))
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(ValueError):
        QTable.load(str(path))


def test_table_rejects_bad_construction():
    with pytest.raises(ValueError):
        QTable((), (3,))
    with pytest.raises(ValueError):
        QTable((2, 0), (3,))
    with pytest.raises(ValueError):
        QTable((2,), (2,), values=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        QTable((1,), (1,), values=[[float("nan")]])


# ----------------------------------------------------------------- training


def short_schedule(train=40, eval_episodes=0, **kw):
    kw.setdefault("alpha", 0.1)
    kw.setdefault("gamma", 0.9)
    kw.setdefault("epsilon", 0.3)
    return QSchedule(train_episodes=train, eval_episodes=eval_episodes, **kw)


def test_train_rejects_normalized_observations():
    cfg = basic_cfg(_normalizeObs=True)
    with pytest.raises(ValueError, match="discrete"):
        train_q(cfg, short_schedule(), seed=1)


def test_train_rejects_mismatched_table():
    cfg = basic_cfg()
    with pytest.raises(ValueError, match="radices"):
        train_q(cfg, short_schedule(), table=QTable((5,), (3,)), seed=1)


def test_train_is_deterministic():
    cfg = basic_cfg()
    a = train_q(cfg, short_schedule(train=60), seed=9)
    b = train_q(cfg, short_schedule(train=60), seed=9)
    assert a.rewards == b.rewards
    assert a.table.values.tobytes() == b.table.values.tobytes()
    assert a.total_steps == b.total_steps


def test_eval_zone_never_writes_the_table():
    cfg = basic_cfg()
    trained = train_q(cfg, short_schedule(train=50), seed=7)
    with_eval = train_q(cfg, short_schedule(train=50, eval_episodes=25),
                        seed=7)
    assert (with_eval.table.values.tobytes()
            == trained.table.values.tobytes())
    assert len(with_eval.rewards) == 75
    assert with_eval.total_steps > trained.total_steps
    assert with_eval.train_boundary_step == trained.total_steps


def test_entries_stay_inside_reward_bound():
    # with Q0 = 0 every update keeps |Q| <= max|r| / (1 - gamma)
    cfg = basic_cfg()
    result = train_q(cfg, short_schedule(train=120, epsilon=0.5), seed=3)
    values = result.table.values
    assert np.isfinite(values).all()
    bound = 11.0 / (1.0 - 0.9)  # per-step rewards stay under 11
    assert np.abs(values).max() <= bound
    assert np.abs(values).max() > 0.0  # something was learned


def test_train_writes_run_directory(tmp_path):
    cfg = basic_cfg()
    out = str(tmp_path / "run0")
    logged = []
    result = train_q(cfg, short_schedule(train=30, eval_episodes=10),
                     out_dir=out, seed=4, summary_freq=100,
                     dump_interval=10, log=logged.append)
    loaded = QTable.load(f"{out}/{MODEL_BASENAME}")
    assert loaded.values.tobytes() == result.table.values.tobytes()

    with open(f"{out}/rewards.csv", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "episode,reward"
    assert len(lines) == 1 + len(result.rewards)
    assert lines[1].startswith("0,")

    series = read_store(f"{out}/metrics.jsonl")
    assert "Environment/Cumulative Reward" in series
    assert "Metrics/Num Episodes" in series

    meta = read_run_meta(out)
    assert meta["finished"] is True
    assert meta["kind"] == "q"
    assert meta["seed"] == 4
    assert meta["total_steps"] == result.total_steps
    assert meta["total_episodes"] == 40
    assert meta["train_boundary_step"] == result.train_boundary_step
    assert 0 < result.train_boundary_step < result.total_steps
    assert meta["experiment"]["trainer"] == "q"
    assert meta["experiment"]["hyperparameters"]["gamma"] == 0.9
    assert meta["experiment"]["environment_parameters"]["_maxSteps"] == 85

    assert len(logged) == 4  # every 10 of 40 episodes
    assert "episode 10/40" in logged[0]


def test_train_marks_unfinished_until_done(tmp_path):
    # a crash mid-run leaves finished False in the metadata; simulate by
    # checking the flag order on a completed run's rewrite
    cfg = basic_cfg()
    out = str(tmp_path / "run1")
    train_q(cfg, short_schedule(train=5), out_dir=out, seed=2)
    assert read_run_meta(out)["finished"] is True


def test_zero_training_keeps_table_pristine():
    cfg = basic_cfg()
    result = train_q(cfg, short_schedule(train=0, eval_episodes=8), seed=6)
    assert not result.table.values.any()
    assert len(result.rewards) == 8
    assert result.train_boundary_step == 0


def test_resumed_table_trains_further():
    cfg = basic_cfg()
    first = train_q(cfg, short_schedule(train=30), seed=8)
    snapshot = first.table.values.copy()
    second = train_q(cfg, short_schedule(train=30), table=first.table,
                     seed=9)
    assert second.table is first.table
    assert (second.table.values != snapshot).any()


def test_evaluate_reports_outcome_rates():
    cfg = basic_cfg()
    trained = train_q(cfg, short_schedule(train=80), seed=12)
    env = ParkingEnv(cfg, seed=13)
    report = evaluate_q(trained.table, env, 20)
    assert report["episodes"] >= 20
    assert (report["park_rate"] + report["crash_rate"]
            + report["halt_rate"]) == pytest.approx(1.0)
    assert len(report["rewards"]) == report["episodes"]
    assert math.isfinite(report["mean_reward"])
    assert report["mean_length"] > 0


def test_evaluate_zero_episodes():
    cfg = basic_cfg()
    env = ParkingEnv(cfg, seed=1)
    table = QTable(env.schema.discrete_dims(), env.action_schema.branches)
    report = evaluate_q(table, env, 0)
    assert report["episodes"] == 0
    assert report["park_rate"] is None


def test_small_run_learns_to_park():
    # single agent, empty lot: a few thousand episodes are enough for a
    # mostly parking policy
    cfg = basic_cfg()
    sched = QSchedule(alpha=0.1, gamma=0.9, epsilon=0.3,
                      train_episodes=1500, eval_episodes=200,
                      decay_episodes=1000)
    result = train_q(cfg, sched, seed=0)
    eval_rewards = result.rewards[sched.train_episodes:]
    mean_eval = sum(eval_rewards) / len(eval_rewards)
    assert mean_eval > 5.0
