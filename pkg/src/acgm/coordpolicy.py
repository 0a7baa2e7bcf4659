"""Graph-ordered actor-critic.

Agent ``i`` acts on its augmented observation

    (o_i, one_hot(u_i at t-1), [one_hot(u_j), present_j] for j = 0..d-1)

where ``present_j`` is 1 exactly when ``j`` is a parent of ``i`` in the
current coordination DAG. Agents are evaluated in topological order, so a
child always sees its parents' actions from the same timestep.

Each agent owns an unshared recurrent actor (dense -> GRU -> dense) and a
centralised critic ``Q_i(s, u)`` over the concatenated observations and the
one-hot joint action.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import dagmath
from .tinynet import MLP, Dense, GRUCell, ParamStore, RMSProp, categorical_sample, log_softmax, softmax


class OrderMismatchError(ValueError):
    """The execution order is not a topological order of the DAG."""


@dataclass
class PolicyConfig:
    n_agents: int
    obs_dim: int
    n_actions: int
    hidden: int = 64
    critic_hidden: int = 64

    @property
    def aug_dim(self) -> int:
        return augmented_width(self.obs_dim, self.n_actions, self.n_agents)

    @property
    def state_dim(self) -> int:
        return self.n_agents * self.obs_dim


def augmented_width(obs_dim: int, n_actions: int, n_agents: int) -> int:
    return obs_dim + n_actions + n_agents * (n_actions + 1)


def _one_hot(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=int)
    out = np.zeros(a.shape + (n,))
    valid = a >= 0
    out[valid, a[valid]] = 1.0
    return out


def augment(obs, last_actions, actions, dag, agent: int, n_actions: int) -> np.ndarray:
    """Augmented observation of ``agent``; all inputs may carry leading batch axes.

    ``obs (..., d, o)``, ``last_actions (..., d)`` (-1 = none),
    ``actions (..., d)`` current-step actions (only parents' entries are read),
    ``dag (..., d, d)``.
    """
    obs = np.asarray(obs, dtype=float)
    present = np.asarray(dag)[..., :, agent].astype(float)
    acts = np.where(present > 0, np.asarray(actions), -1)
    slots = np.concatenate([_one_hot(acts, n_actions), present[..., None]], axis=-1)
    lead = slots.shape[:-2]
    return np.concatenate([
        obs[..., agent, :],
        _one_hot(np.asarray(last_actions)[..., agent], n_actions),
        slots.reshape(lead + (-1,)),
    ], axis=-1)


def joint_action_features(actions, n_actions: int) -> np.ndarray:
    oh = _one_hot(actions, n_actions)
    return oh.reshape(oh.shape[:-2] + (-1,))


class Actor:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int, n_actions: int, rng):
        self.fc_in = Dense(store, f"{name}.fc_in", n_in, hidden, "relu", rng)
        self.gru = GRUCell(store, f"{name}.gru", hidden, hidden, rng)
        self.fc_out = Dense(store, f"{name}.fc_out", hidden, n_actions, "linear", rng)
        self.hidden = hidden

    def step(self, x, h):
        """One timestep: returns ``(logits, h_new)``."""
        e, _ = self.fc_in.forward(x)
        h_new, _ = self.gru.forward(e, h)
        logits, _ = self.fc_out.forward(h_new)
        return logits, h_new

    def unroll(self, xs, h0):
        """Run over ``xs (B, T, n_in)``; returns logits ``(B, T, U)``, hiddens ``(B, T+1, H)``, caches."""
        e, c_in = self.fc_in.forward(xs)
        T = xs.shape[1]
        hs = [h0]
        c_gru = []
        for t in range(T):
            h, c = self.gru.forward(e[:, t], hs[-1])
            hs.append(h)
            c_gru.append(c)
        H = np.stack(hs[1:], axis=1)
        logits, c_out = self.fc_out.forward(H)
        return logits, np.stack(hs, axis=1), (c_in, c_gru, c_out)

    def backward(self, dlogits, caches) -> None:
        c_in, c_gru, c_out = caches
        dH = self.fc_out.backward(dlogits, c_out)
        T = dH.shape[1]
        de = np.zeros(dH.shape[:2] + (self.gru.n_in,))
        dh = np.zeros_like(dH[:, 0])
        for t in reversed(range(T)):
            dx, dh = self.gru.backward(dH[:, t] + dh, c_gru[t])
            de[:, t] = dx
        self.fc_in.backward(de, c_in)


class Critic:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int, rng):
        self.mlp = MLP(store, name, [n_in, hidden, hidden, 1], activation="relu", rng=rng)

    def forward(self, x):
        q, caches = self.mlp.forward(x)
        return q[..., 0], caches

    def backward(self, dq, caches) -> None:
        self.mlp.backward(dq[..., None], caches)


class CoordinatedPolicy:
    """Actors and critics for all agents, with separate parameter stores."""

    def __init__(self, cfg: PolicyConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.actor_store = ParamStore()
        self.critic_store = ParamStore()
        self.actors = [Actor(self.actor_store, f"actor.{i}", cfg.aug_dim, cfg.hidden, cfg.n_actions, rng)
                       for i in range(cfg.n_agents)]
        critic_in = cfg.state_dim + cfg.n_agents * cfg.n_actions
        self.critics = [Critic(self.critic_store, f"critic.{i}", critic_in, cfg.critic_hidden, rng)
                        for i in range(cfg.n_agents)]

    def clone(self) -> "CoordinatedPolicy":
        other = CoordinatedPolicy.__new__(CoordinatedPolicy)
        other.cfg = self.cfg
        other.actor_store = self.actor_store.copy()
        other.critic_store = self.critic_store.copy()
        other.actors, other.critics = [], []
        for a in self.actors:
            b = Actor.__new__(Actor)
            b.hidden = a.hidden
            b.fc_in, b.gru, b.fc_out = (_rebind(m, other.actor_store) for m in (a.fc_in, a.gru, a.fc_out))
            other.actors.append(b)
        for c in self.critics:
            d = Critic.__new__(Critic)
            d.mlp = MLP.__new__(MLP)
            d.mlp.layers = [_rebind(layer, other.critic_store) for layer in c.mlp.layers]
            other.critics.append(d)
        return other

    def sync_from(self, other: "CoordinatedPolicy") -> None:
        self.actor_store.load_from(other.actor_store)
        self.critic_store.load_from(other.critic_store)

    def initial_hidden(self, batch: Tuple[int, ...] = ()) -> np.ndarray:
        return np.zeros(batch + (self.cfg.n_agents, self.cfg.hidden))

    # -- acting --------------------------------------------------------------

    def act_in_order(self, dag, order: Sequence[int], obs, last_actions, hidden, epsilon: float,
                     rng: np.random.Generator, greedy: bool = False):
        """Choose the joint action agent by agent in ``order``.

        Returns ``(actions, new_hidden, logprobs)``; ``logprobs`` are under the
        epsilon-uniform mixture. With ``greedy`` each agent takes the argmax of
        its categorical and ``epsilon`` is ignored.
        """
        d, U = self.cfg.n_agents, self.cfg.n_actions
        dag = np.asarray(dag)
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not dagmath.is_topological(dag, list(order)):
            raise OrderMismatchError(f"order {list(order)} is not topological for the given DAG")
        actions = np.full(d, -1, dtype=np.int64)
        new_hidden = np.array(hidden, dtype=float, copy=True)
        logprobs = np.zeros(d)
        for i in order:
            x = augment(obs, last_actions, actions, dag, i, U)
            logits, new_hidden[i] = self.actors[i].step(x, hidden[i])
            probs = softmax(logits)
            mix = (1.0 - epsilon) * probs + epsilon / U
            if greedy:
                a = int(np.argmax(probs))
                mix = probs
            elif rng.random() < epsilon:
                a = int(rng.integers(U))
            else:
                a = categorical_sample(probs, rng)
            actions[i] = a
            logprobs[i] = np.log(mix[a])
        return actions, new_hidden, logprobs

    def action_probs(self, agent: int, aug_obs, hidden) -> np.ndarray:
        logits, _ = self.actors[agent].step(aug_obs, hidden)
        return softmax(logits)

    # -- critics ---------------------------------------------------------------

    def critic_input(self, states, joint_actions) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape[-1] != self.cfg.state_dim:
            raise ValueError(f"state width {states.shape[-1]} != {self.cfg.state_dim}")
        ja = np.asarray(joint_actions)
        if ja.shape[-1] != self.cfg.n_agents:
            raise ValueError("joint action has the wrong number of agents")
        return np.concatenate([states, joint_action_features(ja, self.cfg.n_actions)], axis=-1)

    def critic_values(self, states, joint_actions) -> np.ndarray:
        """``Q_i(s, u)`` for every agent; shape ``(..., d)``."""
        x = self.critic_input(states, joint_actions)
        return np.stack([c.forward(x)[0] for c in self.critics], axis=-1)

    # -- replay ------------------------------------------------------------------

    def replay_logits(self, agent: int, batch: "EpisodeBatch"):
        xs = augment(batch.obs, batch.last_actions, batch.actions, batch.dags, agent, self.cfg.n_actions)
        h0 = np.zeros((xs.shape[0], self.cfg.hidden))
        return self.actors[agent].unroll(xs, h0)

    def greedy_next_actions(self, batch: "EpisodeBatch") -> np.ndarray:
        """Greedy joint action at every ``t + 1`` of the batch, ``(B, T, d)``.

        Hidden states come from replaying the stored episode; agents then pick
        their argmax action in topological order of the stored next DAG, each
        child seeing its parents' greedy choices.
        """
        B, T, d = batch.actions.shape
        U = self.cfg.n_actions
        hid = np.stack([self.replay_logits(i, batch)[1] for i in range(d)], axis=2)  # (B, T+1, d, H)
        n_obs = batch.next_obs.reshape(B * T, d, -1)
        n_last = batch.actions.reshape(B * T, d)
        n_dag = batch.next_dags.reshape(B * T, d, d)
        n_hid = hid[:, 1:].reshape(B * T, d, -1)
        chosen = np.full((B * T, d), -1, dtype=np.int64)
        # every round, agents whose parents have all chosen act; a DAG needs at most d rounds
        for _ in range(d):
            for i in range(d):
                ready = (chosen[:, i] < 0) & np.all((n_dag[:, :, i] == 0) | (chosen >= 0), axis=1)
                rows = np.flatnonzero(ready)
                if rows.size == 0:
                    continue
                x = augment(n_obs[rows], n_last[rows], chosen[rows], n_dag[rows], i, U)
                logits, _ = self.actors[i].step(x, n_hid[rows, i])
                chosen[rows, i] = np.argmax(logits, axis=-1)
        return chosen.reshape(B, T, d)


def _rebind(layer, store: ParamStore):
    new = type(layer).__new__(type(layer))
    new.__dict__.update(layer.__dict__)
    new.store = store
    return new


# ---------------------------------------------------------------------------
# batches


@dataclass
class EpisodeBatch:
    """Whole episodes padded to a common length ``T``."""

    obs: np.ndarray  # (B, T, d, o)
    last_actions: np.ndarray  # (B, T, d), -1 at t = 0
    actions: np.ndarray  # (B, T, d)
    dags: np.ndarray  # (B, T, d, d)
    rewards: np.ndarray  # (B, T)
    dones: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) 1 on real steps
    next_obs: np.ndarray  # (B, T, d, o)
    next_dags: np.ndarray  # (B, T, d, d); zeros after the last step

    @property
    def states(self) -> np.ndarray:
        B, T, d, o = self.obs.shape
        return self.obs.reshape(B, T, d * o)

    @property
    def next_states(self) -> np.ndarray:
        B, T, d, o = self.next_obs.shape
        return self.next_obs.reshape(B, T, d * o)


@dataclass
class Transitions:
    states: np.ndarray  # (N, S)
    actions: np.ndarray  # (N, d)
    rewards: np.ndarray  # (N,)
    dones: np.ndarray  # (N,)
    next_states: np.ndarray  # (N, S)
    next_actions: Optional[np.ndarray] = None  # (N, d); None -> exact max over joint actions

    def __len__(self) -> int:
        return len(self.rewards)


def transitions_from_batch(batch: EpisodeBatch, target: CoordinatedPolicy) -> Transitions:
    keep = batch.mask.astype(bool)
    nxt = target.greedy_next_actions(batch)
    return Transitions(
        states=batch.states[keep],
        actions=batch.actions[keep],
        rewards=batch.rewards[keep],
        dones=batch.dones[keep],
        next_states=batch.next_states[keep],
        next_actions=nxt[keep],
    )


# ---------------------------------------------------------------------------
# learning rules


def td_target(r: float, done: bool, gamma: float, max_next_q: float) -> float:
    return float(r) if done else float(r + gamma * max_next_q)


def exact_max_q(policy: CoordinatedPolicy, states) -> np.ndarray:
    """``max_u Q_i(s, u)`` per agent by enumerating all joint actions."""
    d, U = policy.cfg.n_agents, policy.cfg.n_actions
    if U ** d > 81:
        raise ValueError("exact max is limited to |U|^d <= 81 joint actions")
    best = None
    for joint in itertools.product(range(U), repeat=d):
        ja = np.broadcast_to(np.array(joint), np.shape(states)[:-1] + (d,))
        q = policy.critic_values(states, ja)
        best = q if best is None else np.maximum(best, q)
    return best


def critic_update(policy: CoordinatedPolicy, target: CoordinatedPolicy, batch: Transitions,
                  gamma: float, optimizer: RMSProp) -> float:
    """One RMSProp step on the mean squared TD error of every agent's critic.

    Returns the pre-step loss averaged over agents.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if batch.next_actions is None:
        next_q = exact_max_q(target, batch.next_states)
    else:
        next_q = target.critic_values(batch.next_states, batch.next_actions)
    notdone = 1.0 - np.asarray(batch.dones, dtype=float)
    y = np.asarray(batch.rewards, dtype=float)[:, None] + gamma * notdone[:, None] * next_q
    x = policy.critic_input(batch.states, batch.actions)
    loss = 0.0
    for i, critic in enumerate(policy.critics):
        q, caches = critic.forward(x)
        err = q - y[:, i]
        loss += float(np.mean(err ** 2))
        critic.backward(2.0 * err / n, caches)
    optimizer.step(policy.critic_store)
    return loss / len(policy.critics)


def actor_update(policy: CoordinatedPolicy, batch: EpisodeBatch, optimizer: RMSProp,
                 q_values: Optional[np.ndarray] = None) -> float:
    """One RMSProp step ascending ``E[grad log pi_i(u_i | o_hat_i) (Q_i - mean Q_i)]``.

    Recurrent states are recomputed from each episode's start. ``q_values``
    ``(B, T, d)`` overrides the critics. Returns the surrogate loss.
    """
    mask = np.asarray(batch.mask, dtype=float)
    n = mask.sum()
    if n == 0:
        raise ValueError("empty batch")
    if q_values is None:
        q_values = policy.critic_values(batch.states, batch.actions)
    total = 0.0
    for i, actor in enumerate(policy.actors):
        logits, _, caches = policy.replay_logits(i, batch)
        q = q_values[..., i]
        adv = (q - (q * mask).sum() / n) * mask
        a = batch.actions[..., i]
        logp = log_softmax(logits)
        chosen = np.take_along_axis(logp, a[..., None], axis=-1)[..., 0]
        total += float(-(chosen * adv).sum() / n)
        onehot = _one_hot(a, policy.cfg.n_actions)
        dlogits = -(onehot - np.exp(logp)) * (adv / n)[..., None]
        actor.backward(dlogits, caches)
    optimizer.step(policy.actor_store)
    return total / len(policy.actors)
