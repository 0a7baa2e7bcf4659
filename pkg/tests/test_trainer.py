import math

import numpy as np
import pytest

from acgm import dagmath as dm
from acgm import trainer as tr
from acgm.config import HyperParams, parse_config
from acgm.envs import make_env


def small_config(extra="", episodes=40):
    return parse_config(
        f"env.name = coordgame\ntrain.episodes = {episodes}\ntrain.warmup = 8\ntrain.batch_size = 4\n"
        "train.critic_warmup = 4\ntrain.eval_every = 10\ntrain.eval_episodes = 3\n"
        "train.actor_hidden = 8\ntrain.critic_hidden = 8\ngenerator.warmup = 4\ngenerator.dual_every = 5\n"
        "generator.hidden = 8\ngenerator.heads = 2\ngenerator.layers = 1\ngenerator.attn_dim = 4\n"
        "generator.decoder_hidden = 8\n" + extra)


@pytest.mark.parametrize("step, eps", [(0, 0.2), (25_000, 0.125), (50_000, 0.05), (10**7, 0.05)])
def test_epsilon_schedule(step, eps):
    assert tr.epsilon_at(step, HyperParams()) == pytest.approx(eps, abs=1e-15)


class TestReplay:
    def test_fifo_and_capacity(self):
        buf = tr.ReplayBuffer(3, np.random.default_rng(0))
        for n in range(5):
            buf.add(n)
            assert len(buf) <= 3
        assert [buf[i] for i in range(3)] == [2, 3, 4]

    def test_sample_without_replacement(self):
        buf = tr.ReplayBuffer(10, np.random.default_rng(0))
        for n in range(10):
            buf.add(n)
        assert sorted(buf.sample(10)) == list(range(10))
        with pytest.raises(ValueError):
            buf.sample(11)


def record(rewards, gamma):
    T = len(rewards)
    z = np.zeros((T, 2, 2))
    return tr.EpisodeRecord(z, np.zeros((T, 2)), np.zeros((T, 2)), z, z, z, np.zeros(T),
                            np.asarray(rewards, float), np.zeros((2, 2)), gamma)


def test_returns_recursion():
    rng = np.random.default_rng(0)
    rec = record(rng.normal(size=25), 0.97)
    R = rec.returns_to_go()
    assert abs(R[-1] - rec.rewards[-1]) < 1e-12
    np.testing.assert_allclose(R[:-1], rec.rewards[:-1] + 0.97 * R[1:], atol=1e-9, rtol=0)
    assert rec.discounted_return == R[0]


class ChainSource:
    """Always emits the single edge 0 -> 1."""

    def __call__(self, obs, last):
        A = np.array([[0, 1], [0, 0]])
        return tr.fixed_output(A, obs, last)


class CopyPolicy:
    """Agent 0 plays the bit it sees; agent 1 copies its parent, or plays 0 without one."""

    def initial_hidden(self):
        return np.zeros((2, 1))

    def act_in_order(self, dag, order, obs, last, hidden, epsilon, rng, greedy=False):
        u = np.full(2, -1)
        for i in order:
            if i == 0:
                u[0] = int(np.argmax(obs[0]))
            else:
                u[1] = u[0] if dag[0, 1] else 0
        return u, hidden, np.zeros(2)


def test_hand_built_coordination_always_wins():
    env = make_env("coordgame", seed=0)
    for _ in range(50):
        rec = tr.run_episode(env, ChainSource(), CopyPolicy(), 0.0, np.random.default_rng(0))
        assert rec.total_reward == 1.0


def test_empty_source_gives_zero_dags():
    env = make_env("cgs", agents=3, episode_len=6, seed=0)
    model = tr.build_model(parse_config("env.name = cgs\nenv.agents = 3\nenv.episode_len = 6\n"), env,
                           np.random.default_rng(0))
    src = tr.graph_source_for(model, np.random.default_rng(1), "empty")
    rec = tr.run_episode(env, src, model.policy, 0.1, np.random.default_rng(2))
    assert len(rec) == 6 and not rec.dags.any()


def test_uniform_actions_at_full_exploration():
    stats = pytest.importorskip("scipy.stats")
    cfg = small_config()
    env = make_env("coordgame", seed=0)
    model = tr.build_model(cfg, env, np.random.default_rng(0))
    src = tr.graph_source_for(model, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    counts = np.zeros(4)
    for _ in range(10_000):
        rec = tr.run_episode(env, src, model.policy, 1.0, rng)
        counts[2 * rec.actions[0, 0] + rec.actions[0, 1]] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_drop_edges():
    rng = np.random.default_rng(0)
    A = dm.load_g528()
    for n in (0, 1, 5, 27):
        B = tr.drop_edges(A, n, rng)
        assert dm.edge_count(B) == 28 - n and np.all(B <= A)
    assert not tr.drop_edges(A, math.inf, rng).any()
    assert not tr.drop_edges(A, 40, rng).any()
    with pytest.raises(ValueError):
        tr.drop_edges(A, -1, rng)


@pytest.fixture(scope="module")
def model():
    cfg = parse_config("env.name = cgs\nenv.agents = 10\ngenerator.hidden = 8\ngenerator.heads = 2\n"
                       "generator.layers = 1\ngenerator.attn_dim = 4\ngenerator.decoder_hidden = 8\n"
                       "train.actor_hidden = 8\ntrain.critic_hidden = 8\n")
    return tr.build_model(cfg, make_env("cgs", agents=10, seed=0), np.random.default_rng(0))


class TestEvaluate:
    def test_zero_episodes(self, model):
        s = tr.evaluate(model, 0)
        assert s.episodes == 0 and s.returns == []
        assert math.isnan(s.mean_return) and math.isnan(s.edges_mean)

    def test_fixed_baseline_edges(self, model):
        s = tr.evaluate(model, 2, override="g528")
        assert s.edges_mean == 28.0
        assert s.nilpotent_mean == dm.nilpotent_index(dm.load_g528())
        assert s.violation_rate == 0.0

    def test_drop_all_equals_empty(self, model):
        a = tr.evaluate(model, 3, seed=4, drop=math.inf)
        b = tr.evaluate(model, 3, seed=4, override="empty")
        assert a.returns == b.returns
        assert a.edges_mean == 0.0

    def test_drop_zero_equals_plain(self, model):
        assert tr.evaluate(model, 3, seed=4, drop=0) == tr.evaluate(model, 3, seed=4)

    def test_bad_override(self, model):
        with pytest.raises(ValueError):
            tr.evaluate(model, 1, override=np.ones((10, 10), dtype=int) - np.eye(10, dtype=int))
        with pytest.raises(ValueError):
            tr.evaluate(model, 1, override=np.zeros((3, 3), dtype=int))
        with pytest.raises(ValueError):
            tr.evaluate(model, 1, override="sparse")


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config("generator.k = 2\n")
    model = tr.train(cfg).model
    path = tmp_path / "m.acgm"
    tr.save_checkpoint(path, model)
    back = tr.load_checkpoint(path)
    assert back.config == cfg
    assert back.lag.k == 2 and back.lag.xi == pytest.approx(model.lag.xi)
    for a, b in ((model.generator.store, back.generator.store), (model.policy.actor_store, back.policy.actor_store),
                 (model.policy.critic_store, back.policy.critic_store)):
        for k in a.params:
            np.testing.assert_allclose(b.params[k], a.params[k], rtol=1e-6, atol=1e-7)
    # float32 storage is lossless on a second round trip
    tr.save_checkpoint(tmp_path / "again.acgm", back)
    assert (tmp_path / "again.acgm").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from acgm.tinynet import CheckpointFormatError

    p = tmp_path / "bad.acgm"
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointFormatError):
        tr.load_checkpoint(p)


def test_training_rows_and_determinism():
    cfg = small_config()
    a = tr.train(cfg).rows
    b = tr.train(cfg).rows
    assert len(a) == 40 and [r["episode"] for r in a] == list(range(1, 41))
    assert set(a[0]) == set(tr.METRIC_COLUMNS)
    table = lambda rows: np.array([[r[c] for c in tr.METRIC_COLUMNS] for r in rows], dtype=float)
    assert np.array_equal(table(a), table(b), equal_nan=True)
    # updates start after warmup; the actor waits for the critic
    assert math.isnan(a[7]["critic_loss"]) and not math.isnan(a[8]["critic_loss"])
    assert math.isnan(a[11]["actor_loss"]) and not math.isnan(a[12]["actor_loss"])


def test_target_networks_sync_on_schedule(monkeypatch):
    seen = []
    orig = tr.critic_update

    def spy(policy, target, *args, **kw):
        seen.append(policy.critic_store.equals(target.critic_store))
        return orig(policy, target, *args, **kw)

    monkeypatch.setattr(tr, "critic_update", spy)
    tr.train(small_config("train.target_sync = 3\n", episodes=20))
    # equal before the first update and right after every third one, never otherwise
    assert seen == [(n % 3 == 0) for n in range(len(seen))]


def test_nan_aborts(monkeypatch):
    monkeypatch.setattr(tr, "critic_update", lambda *a, **k: float("nan"))
    with pytest.raises(tr.TrainingDiverged):
        tr.train(small_config())


def test_empty_mode_never_emits_edges():
    rows = tr.train(small_config("generator.mode = empty\n")).rows
    assert all(r["edges_mean"] == 0 for r in rows)
    assert all(r["xi"] == 1.0 and r["lambda1"] == 0.0 for r in rows)
