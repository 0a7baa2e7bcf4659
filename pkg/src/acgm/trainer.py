"""Training loop: graph-ordered rollouts, episode replay and interleaved updates.

One update round per episode once ``warmup`` episodes are stored:

1. sample ``batch_size`` whole episodes from the replay buffer;
2. actor step on the policy-gradient surrogate, once the critic has had
   ``critic_warmup`` rounds to itself;
3. generator step on the augmented Lagrangian (score = episode discounted
   return), after a further ``generator.warmup`` rounds;
4. critic step on the TD error, target actors/critics synced every ``target_sync`` updates;
5. every ``dual_every`` generator steps, a multiplier / penalty step from the
   batch-mean constraint values averaged over those steps.

Randomness is split into independent streams (environment, graph sampling,
action sampling, edge dropping, replay sampling, initialisation) derived from
one seed, so that e.g. swapping the graph source leaves the action stream
untouched.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from . import dagmath
from .config import EnvSpec, GraphSpec, HyperParams, RunConfig, format_config, parse_config
from .coordpolicy import (CoordinatedPolicy, EpisodeBatch, PolicyConfig, actor_update, critic_update,
                          transitions_from_batch)
from .envs import Env, make_env
from .graphgen import (GeneratorConfig, GeneratorOutput, GraphGenerator, LagrangianState, lagrangian_step)
from .tinynet import ParamStore, RMSProp, read_tensors, write_tensors

__all__ = [
    "HyperParams", "EpisodeRecord", "ReplayBuffer", "Model", "EvalSummary", "TrainResult",
    "epsilon_at", "run_episode", "train", "evaluate", "random_returns", "save_checkpoint", "load_checkpoint",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("episode", "steps", "return", "eval_return", "g_value", "c_value", "xi", "lambda1",
                  "lambda2", "epsilon", "edges_mean", "nilpotent_mean", "repair_rate", "actor_loss",
                  "critic_loss")

STREAMS = ("env", "graph", "action", "drop", "replay", "init", "eval")


def rng_streams(seed: int) -> Dict[str, np.random.SeedSequence]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def epsilon_at(step: int, hp: HyperParams) -> float:
    """Linear anneal from ``eps_start`` to ``eps_end`` over ``eps_anneal_steps``, then flat."""
    frac = min(max(step, 0) / hp.eps_anneal_steps, 1.0)
    return hp.eps_start + frac * (hp.eps_end - hp.eps_start)


# ---------------------------------------------------------------------------
# episodes and replay


@dataclass
class EpisodeRecord:
    obs: np.ndarray  # (T, d, o)
    last_actions: np.ndarray  # (T, d), -1 at t = 0
    actions: np.ndarray  # (T, d)
    weights: np.ndarray  # (T, d, d)
    sampled: np.ndarray  # (T, d, d) pre-repair
    dags: np.ndarray  # (T, d, d)
    graph_logprobs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    final_obs: np.ndarray  # (d, o) observation after the last step
    gamma: float = 0.99

    def __len__(self) -> int:
        return len(self.rewards)

    def returns_to_go(self) -> np.ndarray:
        R = np.zeros(len(self) + 1)
        for t in reversed(range(len(self))):
            R[t] = self.rewards[t] + self.gamma * R[t + 1]
        return R[:-1]

    @property
    def discounted_return(self) -> float:
        return float(self.returns_to_go()[0]) if len(self) else 0.0

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def next_obs(self) -> np.ndarray:
        return np.concatenate([self.obs[1:], self.final_obs[None]], axis=0)

    @property
    def next_dags(self) -> np.ndarray:
        return np.concatenate([self.dags[1:], np.zeros_like(self.dags[:1])], axis=0)


class ReplayBuffer:
    """FIFO store of whole episodes with seeded uniform sampling (no replacement)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i) -> EpisodeRecord:
        return self._items[i]

    def add(self, rec: EpisodeRecord) -> None:
        self._items.append(rec)

    def sample(self, n: int) -> List[EpisodeRecord]:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} episodes from {len(self._items)}")
        idx = self.rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


def episode_batch(records: List[EpisodeRecord]) -> EpisodeBatch:
    """Pad whole episodes to a common length for recurrent replay."""
    B = len(records)
    T = max(len(r) for r in records)
    d, o = records[0].obs.shape[1:]
    obs = np.zeros((B, T, d, o))
    nxt = np.zeros((B, T, d, o))
    last = np.full((B, T, d), -1, dtype=np.int64)
    acts = np.zeros((B, T, d), dtype=np.int64)
    dags = np.zeros((B, T, d, d), dtype=np.int64)
    ndags = np.zeros((B, T, d, d), dtype=np.int64)
    rew = np.zeros((B, T))
    done = np.zeros((B, T))
    mask = np.zeros((B, T))
    for b, r in enumerate(records):
        n = len(r)
        obs[b, :n], nxt[b, :n] = r.obs, r.next_obs
        last[b, :n], acts[b, :n] = r.last_actions, r.actions
        dags[b, :n], ndags[b, :n] = r.dags, r.next_dags
        rew[b, :n] = r.rewards
        done[b, n - 1] = 1.0
        mask[b, :n] = 1.0
    return EpisodeBatch(obs, last, acts, dags, rew, done, mask, nxt, ndags)


# ---------------------------------------------------------------------------
# graph sources

GraphSource = Callable[[np.ndarray, np.ndarray], GeneratorOutput]


def fixed_output(A: np.ndarray, obs=None, last_actions=None) -> GeneratorOutput:
    A = dagmath.check_adjacency(A)
    return GeneratorOutput(A.astype(float), A.copy(), A.copy(), dagmath.topological_order(A), 0.0,
                           None if obs is None else np.asarray(obs, float),
                           None if last_actions is None else np.asarray(last_actions))


def learned_source(gen: GraphGenerator, rng: np.random.Generator) -> GraphSource:
    return lambda obs, last: gen.generate(obs, last, rng)


def fixed_source(A: np.ndarray) -> GraphSource:
    A = dagmath.check_adjacency(A)
    if not dagmath.is_acyclic(A):
        raise ValueError("override graph must be acyclic")
    return lambda obs, last: fixed_output(A, obs, last)


def drop_edges(dag: np.ndarray, n: Union[int, float], rng: np.random.Generator) -> np.ndarray:
    """Remove ``n`` uniformly chosen edges (all of them when ``n`` exceeds the count)."""
    if n < 0:
        raise ValueError("drop count must be nonnegative")
    out = np.array(dag, copy=True)
    if n == 0:
        return out
    edges = np.argwhere(out > 0)
    if n >= len(edges):
        out[...] = 0
        return out
    for i, j in edges[rng.choice(len(edges), size=int(n), replace=False)]:
        out[i, j] = 0
    return out


def dropping_source(base: GraphSource, n: Union[int, float], rng: np.random.Generator) -> GraphSource:
    def source(obs, last):
        out = base(obs, last)
        if n == 0:
            return out
        dag = drop_edges(out.dag, n, rng)
        return GeneratorOutput(out.weights, out.sampled, dag, dagmath.topological_order(dag), out.logprob,
                               out.obs, out.last_actions)
    return source


def run_episode(env: Env, graphs: Union[GraphSource, GraphGenerator], policy: CoordinatedPolicy,
                epsilon: float, rng: np.random.Generator, gamma: float = 0.99, greedy: bool = False,
                graph_rng: Optional[np.random.Generator] = None) -> EpisodeRecord:
    """Roll out one episode: graph -> topological order -> ordered acting -> env step."""
    if isinstance(graphs, GraphGenerator):
        graphs = learned_source(graphs, graph_rng if graph_rng is not None else rng)
    obs = env.reset()
    d = env.n_agents
    last = np.full(d, -1, dtype=np.int64)
    hidden = policy.initial_hidden()
    rows = {k: [] for k in ("obs", "last", "act", "w", "s", "dag", "lp", "r")}
    done = False
    while not done:
        g = graphs(obs, last)
        actions, hidden, _ = policy.act_in_order(g.dag, g.order, obs, last, hidden, epsilon, rng, greedy=greedy)
        res = env.step(actions)
        for k, v in (("obs", obs), ("last", last), ("act", actions), ("w", g.weights), ("s", g.sampled),
                     ("dag", g.dag), ("lp", g.logprob), ("r", res.reward)):
            rows[k].append(v)
        obs, last, done = res.observations, actions, res.done
    return EpisodeRecord(
        obs=np.array(rows["obs"], dtype=float), last_actions=np.array(rows["last"], dtype=np.int64),
        actions=np.array(rows["act"], dtype=np.int64), weights=np.array(rows["w"], dtype=float),
        sampled=np.array(rows["s"], dtype=np.int64), dags=np.array(rows["dag"], dtype=np.int64),
        graph_logprobs=np.array(rows["lp"], dtype=float), rewards=np.array(rows["r"], dtype=float),
        final_obs=np.asarray(obs, dtype=float), gamma=gamma)


# ---------------------------------------------------------------------------
# model container and checkpoints


@dataclass
class Model:
    config: RunConfig
    generator: GraphGenerator
    policy: CoordinatedPolicy
    lag: LagrangianState

    @property
    def n_agents(self) -> int:
        return self.policy.cfg.n_agents


def make_env_from(spec: EnvSpec, seed) -> Env:
    kw = {"terminal_reward_only": True} if spec.terminal_reward_only and spec.name == "cgs" else {}
    return make_env(spec.name, agents=spec.agents, episode_len=spec.episode_len, seed=seed, **kw)


def build_model(cfg: RunConfig, env: Env, rng: np.random.Generator) -> Model:
    gs = cfg.generator
    gen = GraphGenerator(GeneratorConfig(env.n_agents, env.obs_dim, env.n_actions, hidden=gs.hidden,
                                         heads=gs.heads, layers=gs.layers, attn_dim=gs.attn_dim,
                                         decoder_hidden=gs.decoder_hidden), rng)
    pol = CoordinatedPolicy(PolicyConfig(env.n_agents, env.obs_dim, env.n_actions,
                                         hidden=cfg.train.actor_hidden, critic_hidden=cfg.train.critic_hidden), rng)
    return Model(cfg, gen, pol, LagrangianState(xi=gs.xi, k=gs.k))


CONFIG_TENSOR = "__config__"
LAG_TENSOR = "__lagrangian__"


def save_checkpoint(path, model: Model) -> None:
    """Parameters, multipliers and the config echo, in the tensor record format."""
    tensors = {}
    for prefix, store in (("g/", model.generator.store), ("a/", model.policy.actor_store),
                          ("c/", model.policy.critic_store)):
        for k, v in store.params.items():
            tensors[prefix + k] = v
    lag = model.lag
    tensors[LAG_TENSOR] = np.array([lag.xi, lag.lambda1, lag.lambda2, lag.k,
                                    lag.violation_prev if math.isfinite(lag.violation_prev) else -1.0])
    tensors[CONFIG_TENSOR] = np.frombuffer(format_config(model.config).encode("utf-8"), dtype=np.uint8)
    write_tensors(path, tensors)


def load_checkpoint(path) -> Model:
    from .tinynet import CheckpointFormatError

    t = read_tensors(path)
    if CONFIG_TENSOR not in t or LAG_TENSOR not in t:
        raise CheckpointFormatError("checkpoint lacks config or multiplier records")
    cfg = parse_config(bytes(t[CONFIG_TENSOR].astype(np.uint8)).decode("utf-8"))
    env = make_env_from(cfg.env, 0)
    model = build_model(cfg, env, np.random.default_rng(0))
    for prefix, store in (("g/", model.generator.store), ("a/", model.policy.actor_store),
                          ("c/", model.policy.critic_store)):
        loaded = ParamStore()
        for k in store.params:
            if prefix + k not in t:
                raise CheckpointFormatError(f"missing tensor {prefix + k!r}")
            loaded.add(k, t[prefix + k])
        try:
            store.load_from(loaded)
        except (KeyError, ValueError) as exc:
            raise CheckpointFormatError(str(exc)) from None
    xi, l1, l2, k, vprev = (float(x) for x in t[LAG_TENSOR])
    model.lag = LagrangianState(xi=xi, lambda1=l1, lambda2=l2, k=int(k),
                                violation_prev=math.inf if vprev < 0 else vprev)
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSummary:
    episodes: int
    mean_return: float
    std_return: float
    edges_mean: float
    nilpotent_mean: float
    violation_rate: float
    returns: List[float] = field(default_factory=list)


def graph_source_for(model: Model, rng: np.random.Generator, override=None) -> GraphSource:
    """The model's generator, or a fixed graph: an array, ``"empty"`` or ``"g528"``."""
    d = model.n_agents
    if override is None:
        mode = model.config.generator.mode
        override = None if mode == "learned" else mode
    if override is None:
        return learned_source(model.generator, rng)
    if isinstance(override, str):
        if override == "empty":
            return fixed_source(np.zeros((d, d), dtype=np.int64))
        if override == "g528":
            A = dagmath.load_g528()
            if d != A.shape[0]:
                raise ValueError(f"the fixed 10-agent baseline does not fit {d} agents")
            return fixed_source(A)
        raise ValueError(f"unknown graph override {override!r}")
    A = dagmath.check_adjacency(override)
    if A.shape != (d, d):
        raise ValueError(f"override graph must be {d}x{d}")
    return fixed_source(A)


def evaluate(model: Model, episodes: int, seed: int = 0, override=None, drop: Union[int, float] = 0,
             epsilon: float = 0.0, env_spec: Optional[EnvSpec] = None) -> EvalSummary:
    """Greedy rollouts (``epsilon = 0``) with freshly sampled graphs.

    ``override`` pins the graph; ``drop`` removes that many random edges from
    every emitted DAG (``math.inf`` removes all). Returns are undiscounted
    episode sums. Violations count steps whose sample was cyclic or whose DAG
    is deeper than the model's bound ``k``.
    """
    if episodes < 0:
        raise ValueError("episodes must be >= 0")
    if episodes == 0:
        nan = float("nan")
        return EvalSummary(0, nan, nan, nan, nan, nan, [])
    streams = rng_streams(seed)
    env = make_env_from(env_spec or model.config.env, streams["env"])
    graph_rng = np.random.default_rng(streams["graph"])
    source = graph_source_for(model, graph_rng, override)
    source = dropping_source(source, drop, np.random.default_rng(streams["drop"]))
    act_rng = np.random.default_rng(streams["action"])
    greedy = epsilon == 0.0
    k = model.lag.k
    returns, edges, nil, viol = [], [], [], []
    for _ in range(episodes):
        rec = run_episode(env, source, model.policy, epsilon, act_rng, greedy=greedy)
        returns.append(rec.total_reward)
        for s, A in zip(rec.sampled, rec.dags):
            edges.append(dagmath.edge_count(A))
            idx = dagmath.nilpotent_index(A)
            nil.append(idx)
            viol.append((not dagmath.is_acyclic(s)) or idx > k)
    r = np.array(returns)
    return EvalSummary(episodes, float(r.mean()), float(r.std()), float(np.mean(edges)), float(np.mean(nil)),
                       float(np.mean(viol)), returns)


def random_returns(cfg: RunConfig, episodes: int) -> np.ndarray:
    """Undiscounted returns of uniformly random joint actions on the training env seeds."""
    streams = rng_streams(cfg.run.seed)
    env = make_env_from(cfg.env, cfg.env.seed if cfg.env.seed is not None else streams["env"])
    rng = np.random.default_rng(streams["action"])
    out = np.zeros(episodes)
    for e in range(episodes):
        env.reset()
        done = False
        while not done:
            res = env.step(rng.integers(env.n_actions, size=env.n_agents))
            out[e] += res.reward
            done = res.done
    return out


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: Model
    rows: List[dict]


def _check_finite(what: str, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged(f"non-finite {what}: {v}")


def train(cfg: RunConfig, on_row: Optional[Callable[[dict], None]] = None,
          on_checkpoint: Optional[Callable[[int, Model], None]] = None) -> TrainResult:
    """Run the full loop for ``cfg.train.episodes`` episodes; one metrics row each."""
    cfg.validate()
    hp = cfg.train
    streams = rng_streams(cfg.run.seed)
    env = make_env_from(cfg.env, cfg.env.seed if cfg.env.seed is not None else streams["env"])
    model = build_model(cfg, env, np.random.default_rng(streams["init"]))
    gen, policy = model.generator, model.policy
    target = policy.clone()
    learned = cfg.generator.mode == "learned"
    source = graph_source_for(model, np.random.default_rng(streams["graph"]))
    act_rng = np.random.default_rng(streams["action"])
    buffer = ReplayBuffer(hp.capacity, np.random.default_rng(streams["replay"]))
    opt = dict(actor=RMSProp(hp.lr, hp.rms_alpha), critic=RMSProp(hp.lr, hp.rms_alpha),
               gen=RMSProp(hp.lr, hp.rms_alpha))
    steps = updates = 0
    window = []  # batch-mean (g, c) since the last multiplier step
    eval_return = float("nan")
    rows = []
    for episode in range(1, hp.episodes + 1):
        eps = epsilon_at(steps, hp)
        rec = run_episode(env, source, policy, eps, act_rng, gamma=hp.gamma)
        buffer.add(rec)
        steps += len(rec)
        actor_loss = critic_loss = float("nan")
        if episode > hp.warmup and len(buffer) >= hp.batch_size:
            recs = buffer.sample(hp.batch_size)
            batch = episode_batch(recs)
            if updates >= hp.critic_warmup:
                actor_loss = actor_update(policy, batch, opt["actor"])
            gen_active = learned and updates >= hp.critic_warmup + cfg.generator.warmup
            if gen_active:
                stats = gen.accumulate_gradient(
                    np.concatenate([r.obs for r in recs]),
                    np.concatenate([r.last_actions for r in recs]),
                    np.concatenate([r.sampled for r in recs]),
                    np.concatenate([np.full(len(r), r.discounted_return) for r in recs]),
                    model.lag)
                _check_finite("constraint values", stats["g"], stats["c"])
                opt["gen"].step(gen.store)
            critic_loss = critic_update(policy, target, transitions_from_batch(batch, target), hp.gamma,
                                        opt["critic"])
            _check_finite("losses", critic_loss, 0.0 if math.isnan(actor_loss) else actor_loss)
            updates += 1
            if updates % hp.target_sync == 0:
                target.sync_from(policy)
            if gen_active:
                window.append((stats["g"], stats["c"]))
                if len(window) == cfg.generator.dual_every:
                    g_mean, c_mean = np.mean(window, axis=0)
                    model.lag = lagrangian_step(model.lag, float(g_mean), float(c_mean))
                    window = []
        if hp.eval_every and episode % hp.eval_every == 0:
            ev = evaluate(model, hp.eval_episodes, seed=cfg.run.seed + episode)
            eval_return = ev.mean_return
        g_vals = [dagmath.acyclicity_value(w) for w in rec.weights]
        c_vals = [dagmath.depth_value(w, model.lag.k) for w in rec.weights]
        row = {
            "episode": episode, "steps": steps, "return": rec.total_reward, "eval_return": eval_return,
            "g_value": float(np.mean(g_vals)), "c_value": float(np.mean(c_vals)),
            "xi": model.lag.xi, "lambda1": model.lag.lambda1, "lambda2": model.lag.lambda2, "epsilon": eps,
            "edges_mean": float(np.mean([dagmath.edge_count(A) for A in rec.dags])),
            "nilpotent_mean": float(np.mean([dagmath.nilpotent_index(A) for A in rec.dags])),
            "repair_rate": float(np.mean([not np.array_equal(s, A) for s, A in zip(rec.sampled, rec.dags)])),
            "actor_loss": actor_loss, "critic_loss": critic_loss,
        }
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if on_checkpoint is not None and hp.checkpoint_every and episode % hp.checkpoint_every == 0:
            on_checkpoint(episode, model)
    return TrainResult(model, rows)
