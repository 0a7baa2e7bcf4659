"""Seedable cooperative environments with a shared reward.

Each environment is a small state machine: ``reset()`` draws the episode's
initial state from the environment's own RNG, ``step(joint_action)`` takes
one action *index* per agent and returns a :class:`StepResult`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

CGS_MU = 5.0
CGS_SIGMA = 1.25


class EnvProtocolError(RuntimeError):
    """Stepping an environment that is finished or was never reset."""


@dataclass
class StepResult:
    observations: np.ndarray
    reward: float
    done: bool


def _check_actions(joint_action, n_agents: int, low: int, high: int) -> np.ndarray:
    a = np.asarray(joint_action)
    if a.shape != (n_agents,):
        raise ValueError(f"expected {n_agents} actions, got shape {a.shape}")
    if np.any(a != np.round(a)) or np.any(a < low) or np.any(a > high):
        raise ValueError(f"actions must be integers in [{low}, {high}], got {a.tolist()}")
    return a.astype(np.int64)


class Env:
    name = "base"
    n_agents: int
    n_actions: int
    obs_dim: int
    episode_len: int

    def __init__(self, seed: Optional[int] = None):
        self.rng = np.random.default_rng(seed)
        self.state = None

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError

    def _ensure_running(self):
        if self.state is None:
            raise EnvProtocolError("reset() must be called before step()")
        if self.state.t >= self.episode_len:
            raise EnvProtocolError("episode is done; call reset()")


# ---------------------------------------------------------------------------
# Collaborative Gaussian Squeeze


def cgs_reward(f: float) -> float:
    """``f exp(-(f-5)^2/1.25^2) - f exp(-(f+5)^2/1.25^2)``."""
    s2 = CGS_SIGMA ** 2
    return float(f * np.exp(-((f - CGS_MU) ** 2) / s2) - f * np.exp(-((f + CGS_MU) ** 2) / s2))


@dataclass(frozen=True)
class CGSState:
    resources: np.ndarray  # s_i in [0, 0.2]
    t: int = 0


def cgs_observations(state: CGSState, episode_len: int) -> np.ndarray:
    return np.stack([state.resources, np.full_like(state.resources, state.t / episode_len)], axis=1)


def cgs_step(state: CGSState, joint_action, episode_len: int = 10,
             terminal_reward_only: bool = False):
    """Pure transition; ``joint_action`` holds the action values in -10..10."""
    if state.t >= episode_len:
        raise EnvProtocolError("episode is done; call reset()")
    a = _check_actions(joint_action, state.resources.size, -10, 10)
    f = float(np.dot(state.resources, a))
    nxt = dataclasses.replace(state, t=state.t + 1)
    done = nxt.t >= episode_len
    reward = cgs_reward(f) if (done or not terminal_reward_only) else 0.0
    return nxt, StepResult(cgs_observations(nxt, episode_len), reward, done)


class GaussianSqueeze(Env):
    name = "cgs"
    n_actions = 21
    obs_dim = 2

    def __init__(self, n_agents: int = 10, episode_len: int = 10, seed: Optional[int] = None,
                 terminal_reward_only: bool = False):
        super().__init__(seed)
        self.n_agents = n_agents
        self.episode_len = episode_len
        self.terminal_reward_only = terminal_reward_only

    @staticmethod
    def action_value(index) -> np.ndarray:
        return np.asarray(index) - 10

    def reset(self) -> np.ndarray:
        self.state = CGSState(self.rng.uniform(0.0, 0.2, size=self.n_agents), 0)
        return cgs_observations(self.state, self.episode_len)

    def step(self, joint_action) -> StepResult:
        self._ensure_running()
        a = _check_actions(joint_action, self.n_agents, 0, self.n_actions - 1)
        self.state, res = cgs_step(self.state, self.action_value(a), self.episode_len, self.terminal_reward_only)
        return res


# ---------------------------------------------------------------------------
# Cooperative Navigation (first-order kinematics)

NAV_MOVES = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])  # up down left right stop
NAV_STEP = 0.1
NAV_COLLISION = 0.1
NAV_ARENA = 1.0


@dataclass(frozen=True)
class NavState:
    agents: np.ndarray  # (n, 2)
    landmarks: np.ndarray  # (m, 2)
    t: int = 0


def nav_reward(agents: np.ndarray, landmarks: np.ndarray) -> float:
    """Negative summed landmark-to-nearest-agent distance minus one per colliding pair."""
    dl = np.linalg.norm(landmarks[:, None, :] - agents[None, :, :], axis=-1)
    cover = dl.min(axis=1).sum()
    da = np.linalg.norm(agents[:, None, :] - agents[None, :, :], axis=-1)
    iu = np.triu_indices(len(agents), k=1)
    collisions = int(np.sum(da[iu] < NAV_COLLISION))
    return float(-cover - collisions)


def nav_observations(state: NavState) -> np.ndarray:
    n = len(state.agents)
    rows = []
    for i in range(n):
        own = state.agents[i]
        to_land = (state.landmarks - own).ravel()
        others = np.delete(state.agents, i, axis=0)
        rows.append(np.concatenate([own, to_land, (others - own).ravel()]))
    return np.stack(rows)


def nav_step(state: NavState, joint_action, episode_len: int = 25):
    """Pure transition; actions are indices into up/down/left/right/stop."""
    if state.t >= episode_len:
        raise EnvProtocolError("episode is done; call reset()")
    a = _check_actions(joint_action, len(state.agents), 0, 4)
    agents = np.clip(state.agents + NAV_STEP * NAV_MOVES[a], -NAV_ARENA, NAV_ARENA)
    nxt = NavState(agents, state.landmarks, state.t + 1)
    return nxt, StepResult(nav_observations(nxt), nav_reward(agents, state.landmarks), nxt.t >= episode_len)


class CooperativeNavigation(Env):
    name = "nav"
    n_actions = 5

    def __init__(self, n_agents: int = 3, episode_len: int = 25, seed: Optional[int] = None):
        super().__init__(seed)
        self.n_agents = n_agents
        self.episode_len = episode_len
        self.obs_dim = 2 + 2 * n_agents + 2 * (n_agents - 1)

    def reset(self) -> np.ndarray:
        n = self.n_agents
        pts = self.rng.uniform(-NAV_ARENA, NAV_ARENA, size=(2 * n, 2))
        self.state = NavState(pts[:n], pts[n:], 0)
        return nav_observations(self.state)

    def step(self, joint_action) -> StepResult:
        self._ensure_running()
        self.state, res = nav_step(self.state, joint_action, self.episode_len)
        return res


# ---------------------------------------------------------------------------
# two-agent coordination game

@dataclass(frozen=True)
class CoordState:
    target: int
    t: int = 0


def coordgame_observations(state: CoordState) -> np.ndarray:
    obs = np.zeros((2, 2))
    if state.t == 0:
        obs[0, state.target] = 1.0
    return obs


def coordgame_step(state: CoordState, joint_action):
    """Reward 1 iff agent 0 plays the hidden target and agent 1 copies agent 0."""
    if state.t >= 1:
        raise EnvProtocolError("episode is done; call reset()")
    u = _check_actions(joint_action, 2, 0, 1)
    reward = float(u[0] == state.target and u[1] == u[0])
    nxt = dataclasses.replace(state, t=1)
    return nxt, StepResult(coordgame_observations(nxt), reward, True)


class CoordGame(Env):
    """Agent 0 sees a hidden bit, agent 1 sees nothing; one step per episode."""

    name = "coordgame"
    n_agents = 2
    n_actions = 2
    obs_dim = 2
    episode_len = 1

    def reset(self) -> np.ndarray:
        self.state = CoordState(int(self.rng.integers(2)), 0)
        return coordgame_observations(self.state)

    def step(self, joint_action) -> StepResult:
        self._ensure_running()
        self.state, res = coordgame_step(self.state, joint_action)
        return res


ENVIRONMENTS = {"cgs": GaussianSqueeze, "nav": CooperativeNavigation, "coordgame": CoordGame}


def make_env(name: str, agents: Optional[int] = None, episode_len: Optional[int] = None,
             seed: Optional[int] = None, **kwargs) -> Env:
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    if name == "coordgame":
        if agents not in (None, 2) or episode_len not in (None, 1):
            raise ValueError("coordgame has exactly 2 agents and episode length 1")
        return CoordGame(seed)
    opts = dict(kwargs)
    if agents is not None:
        opts["n_agents"] = agents
    if episode_len is not None:
        opts["episode_len"] = episode_len
    return ENVIRONMENTS[name](seed=seed, **opts)
