"""Graph generator: observations -> edge probabilities -> sampled coordination DAG.

The generator embeds each agent's (observation, one-hot last action) with an
MLP, runs two independently parameterised stacks of multi-head attention
layers, and scores every ordered pair with a single-layer decoder. Edges are
sampled independently, cycles are repaired, and the result is executed in
topological order by the policy.

Training minimises the augmented Lagrangian

    -eta + lambda1 * g(W) + lambda2 * c(W^k) + xi/2 * (g(W)^2 + c(W^k)^2)

with a score-function estimate for ``eta`` and exact pathwise gradients for
the constraint terms.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import dagmath
from .tinynet import GATLayer, MLP, PairDecoder, ParamStore, sigmoid

PROB_CLAMP = 1e-6


@dataclass
class GeneratorConfig:
    n_agents: int
    obs_dim: int
    n_actions: int
    hidden: int = 64
    heads: int = 8
    layers: int = 4
    attn_dim: int = 16
    decoder_hidden: int = 64


@dataclass
class GeneratorOutput:
    weights: np.ndarray  # (d, d) edge probabilities, zero diagonal
    sampled: np.ndarray  # (d, d) pre-repair Bernoulli sample
    dag: np.ndarray  # (d, d) repaired, acyclic
    order: List[int]
    logprob: float  # of ``sampled`` under ``weights``
    obs: Optional[np.ndarray] = None
    last_actions: Optional[np.ndarray] = None

    @property
    def repaired(self) -> bool:
        return not np.array_equal(self.sampled, self.dag)


@dataclass
class LagrangianState:
    xi: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    k: int = 5
    violation_prev: float = math.inf
    xi_max: float = 1e8

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("penalty xi must be nonnegative")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("depth bound k must be a positive integer")


def lagrangian_step(lag: LagrangianState, g: float, c: float) -> LagrangianState:
    """Dual ascent on the multipliers; grow xi tenfold unless the violation shrank 4x."""
    violation = g + c
    xi = lag.xi
    if violation > 0.25 * lag.violation_prev:
        xi = min(10.0 * xi, lag.xi_max)
    return dataclasses.replace(
        lag,
        lambda1=lag.lambda1 + lag.xi * g,
        lambda2=lag.lambda2 + lag.xi * c,
        xi=xi,
        violation_prev=violation,
    )


def bernoulli_logprob(sampled, weights) -> np.ndarray:
    """Sum over off-diagonal entries of log Bernoulli(sampled | weights), clamped."""
    w = np.clip(weights, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = np.where(np.asarray(sampled) > 0, np.log(w), np.log1p(-w))
    d = ll.shape[-1]
    ll = np.where(np.eye(d, dtype=bool), 0.0, ll)
    return ll.sum(axis=(-2, -1))


def repair_to_dag(sampled, weights) -> np.ndarray:
    """Delete the lowest-weight edge of some cycle until none remain.

    Ties go to the lexicographically smallest ``(source, target)``. Edges that
    lie on no cycle are never touched.
    """
    A = dagmath.check_adjacency(sampled).copy()
    weights = np.asarray(weights, dtype=float)
    while True:
        cycle = dagmath.find_cycle(A)
        if cycle is None:
            return A
        edges = list(zip(cycle[:-1], cycle[1:]))
        i, j = min(edges, key=lambda e: (weights[e], e))
        A[i, j] = 0


def constraint_values(out: GeneratorOutput, k: int) -> Tuple[float, float]:
    """``(g(W), c(W^k))`` on the continuous weight matrix."""
    return dagmath.acyclicity_value(out.weights), dagmath.depth_value(out.weights, k)


def one_hot_actions(last_actions, n_actions: int) -> np.ndarray:
    """One-hot rows; negative entries (no previous action) give all-zero rows."""
    a = np.asarray(last_actions, dtype=int)
    out = np.zeros(a.shape + (n_actions,))
    valid = a >= 0
    out[valid, a[valid]] = 1.0
    return out


class GraphGenerator:
    """Parameterised distribution over coordination graphs."""

    def __init__(self, cfg: GeneratorConfig, rng: Optional[np.random.Generator] = None,
                 store: Optional[ParamStore] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        n_in = cfg.obs_dim + cfg.n_actions
        self.embed = MLP(self.store, "gen.mlp", [n_in, cfg.hidden, cfg.hidden],
                         activation="relu", out_activation="relu", rng=rng)
        self.enc_l = [GATLayer(self.store, f"gen.enc_l.{n}", cfg.hidden, cfg.hidden, cfg.heads, cfg.attn_dim, rng)
                      for n in range(cfg.layers)]
        self.enc_r = [GATLayer(self.store, f"gen.enc_r.{n}", cfg.hidden, cfg.hidden, cfg.heads, cfg.attn_dim, rng)
                      for n in range(cfg.layers)]
        # zero output vector: every edge starts at probability exactly 0.5
        self.decoder = PairDecoder(self.store, "gen.dec", cfg.hidden, cfg.decoder_hidden, rng, zero_output=True)

    # -- forward / backward over batches shaped (..., d, obs_dim) -------------

    def logits(self, obs, last_actions):
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.cfg.obs_dim}")
        x = np.concatenate([obs, one_hot_actions(last_actions, self.cfg.n_actions)], axis=-1)
        h, c_embed = self.embed.forward(x)
        hl, c_l = h, []
        for layer in self.enc_l:
            hl, c = layer.forward(hl)
            c_l.append(c)
        hr, c_r = h, []
        for layer in self.enc_r:
            hr, c = layer.forward(hr)
            c_r.append(c)
        z, c_dec = self.decoder.forward(hl, hr)
        return z, (c_embed, c_l, c_r, c_dec)

    def weights(self, obs, last_actions) -> np.ndarray:
        z, _ = self.logits(obs, last_actions)
        return self._probs(z)

    @staticmethod
    def _probs(z: np.ndarray) -> np.ndarray:
        d = z.shape[-1]
        return np.where(np.eye(d, dtype=bool), 0.0, sigmoid(z))

    def backward(self, dz, cache) -> None:
        c_embed, c_l, c_r, c_dec = cache
        dhl, dhr = self.decoder.backward(dz, c_dec)
        for layer, c in zip(reversed(self.enc_l), reversed(c_l)):
            dhl = layer.backward(dhl, c)
        for layer, c in zip(reversed(self.enc_r), reversed(c_r)):
            dhr = layer.backward(dhr, c)
        self.embed.backward(dhl + dhr, c_embed)

    # -- sampling --------------------------------------------------------------

    def generate(self, obs, last_actions, rng: np.random.Generator,
                 force_weights: Optional[np.ndarray] = None) -> GeneratorOutput:
        """Sample one coordination DAG for a single timestep.

        ``force_weights`` bypasses the network (used to pin edge probabilities).
        """
        obs = np.asarray(obs, dtype=float)
        d = obs.shape[0]
        if d != self.cfg.n_agents:
            raise ValueError(f"expected {self.cfg.n_agents} agents, got {d}")
        if d == 1:
            empty = np.zeros((1, 1), dtype=np.int64)
            return GeneratorOutput(np.zeros((1, 1)), empty, empty.copy(), [0], 0.0, obs, np.asarray(last_actions))
        if force_weights is not None:
            W = np.where(np.eye(d, dtype=bool), 0.0, np.asarray(force_weights, dtype=float))
        else:
            W = self.weights(obs, last_actions)
        return sample_graph(W, rng, obs, last_actions)

    # -- learning ----------------------------------------------------------------

    def accumulate_gradient(self, obs, last_actions, sampled, scores, lag: LagrangianState,
                            baseline: Optional[float] = None, reinforce: bool = True) -> dict:
        """Accumulate the gradient of the augmented Lagrangian into ``store.grads``.

        Arrays are stacked over a batch axis: ``obs (N, d, o)``,
        ``last_actions (N, d)``, ``sampled (N, d, d)``, ``scores (N,)``.
        The score-function term uses ``scores - baseline`` (batch mean by
        default); the constraint terms are averaged over the batch.
        """
        scores = np.asarray(scores, dtype=float)
        n = scores.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if not np.all(np.isfinite(scores)):
            raise ValueError("non-finite scores")
        z, cache = self.logits(obs, last_actions)
        w = self._probs(z)
        d = w.shape[-1]
        off = ~np.eye(d, dtype=bool)
        dz = np.zeros_like(z)
        if reinforce:
            b = scores.mean() if baseline is None else float(baseline)
            inside = (w > PROB_CLAMP) & (w < 1.0 - PROB_CLAMP) & off
            dlogp = np.where(inside, np.asarray(sampled, dtype=float) - w, 0.0)
            dz -= (scores - b)[:, None, None] * dlogp / n
        g = dagmath.acyclicity_value(w)
        c = dagmath.depth_value(w, lag.k)
        coef_g = lag.lambda1 + lag.xi * g
        coef_c = lag.lambda2 + lag.xi * c
        dW = (coef_g[:, None, None] * dagmath.acyclicity_grad(w)
              + coef_c[:, None, None] * dagmath.depth_grad(w, lag.k))
        dz += np.where(off, dW * w * (1.0 - w), 0.0) / n
        self.backward(dz, cache)
        return {"g": float(np.mean(g)), "c": float(np.mean(c))}


def sample_graph(W: np.ndarray, rng: np.random.Generator, obs=None, last_actions=None) -> GeneratorOutput:
    d = W.shape[0]
    sampled = (rng.random((d, d)) < W).astype(np.int64)
    np.fill_diagonal(sampled, 0)
    dag = repair_to_dag(sampled, W)
    return GeneratorOutput(
        weights=W,
        sampled=sampled,
        dag=dag,
        order=dagmath.topological_order(dag),
        logprob=float(bernoulli_logprob(sampled, W)),
        obs=None if obs is None else np.asarray(obs, dtype=float),
        last_actions=None if last_actions is None else np.asarray(last_actions),
    )


def generator_gradient(gen: GraphGenerator, batch: Sequence[Tuple[GeneratorOutput, float]],
                       lag: LagrangianState, baseline: Optional[float] = None) -> dict:
    """Gradient of the augmented Lagrangian from ``(output, score)`` pairs."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    outs = [o for o, _ in batch]
    return gen.accumulate_gradient(
        np.stack([o.obs for o in outs]),
        np.stack([o.last_actions for o in outs]),
        np.stack([o.sampled for o in outs]),
        np.array([s for _, s in batch], dtype=float),
        lag,
        baseline=baseline,
    )
