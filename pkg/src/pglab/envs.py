"""Seedable toy environments with snapshot/restore, plus a tabular MDP oracle.

Every environment can be snapshotted at a state and restored any number of
times; a restore also rewinds the environment's private RNG, so stochastic
transitions replay bit-identically.  That is what lets a trainer evaluate a
group of N actions from one shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_HORIZON = 200


class EnvContractError(RuntimeError):
    """Raised on misuse: stepping a finished episode, restoring a foreign snapshot."""


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    truncated: bool = False

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


@dataclass(frozen=True)
class EnvState:
    """Opaque snapshot.  ``owner`` pins it to one environment configuration."""

    owner: tuple
    payload: tuple
    rng_state: dict = field(compare=False)


class Env:
    name = "env"
    observation_dim: int
    n_actions: int | None = None  # None means continuous
    action_dim: int = 1

    def __init__(self, horizon: int = DEFAULT_HORIZON):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = int(horizon)
        self._rng = np.random.default_rng(0)
        self.t = 0
        self.done = True

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None

    def _config(self) -> tuple:
        return (self.name, self.horizon)

    # subclass hooks
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _transition(self, action) -> tuple[float, bool]:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _get_state(self) -> tuple:
        raise NotImplementedError

    def _set_state(self, state: tuple) -> None:
        raise NotImplementedError

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start a new episode; a seed re-seeds the private RNG, None continues its stream."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset_state()
        return self._observe()

    def step(self, action) -> StepResult:
        if self.done:
            raise EnvContractError(f"{self.name}: step() called on a finished episode; reset() first")
        reward, terminal = self._transition(action)
        self.t += 1
        truncated = (not terminal) and self.t >= self.horizon
        self.done = terminal or truncated
        return StepResult(self._observe(), float(reward), bool(terminal), truncated)

    def snapshot(self) -> EnvState:
        return EnvState(self._config(), (self.t, self.done, self._get_state()), self._rng.bit_generator.state)

    def restore(self, state: EnvState) -> None:
        if not isinstance(state, EnvState) or state.owner != self._config():
            owner = getattr(state, "owner", None)
            raise EnvContractError(f"cannot restore snapshot of {owner!r} into {self._config()!r}")
        self.t, self.done, inner = state.payload
        self._set_state(inner)
        self._rng.bit_generator.state = state.rng_state

    def reseed_noise(self, seed: int) -> None:
        """Replace the transition-noise stream without touching the current state."""
        self._rng = np.random.default_rng(seed)

    def to_mdp(self, gamma: float) -> "TabularMDP":
        raise NotImplementedError(f"{self.name} has no tabular form")


class SparseChain(Env):
    """Deterministic chain; reward 1 only on entering the last state.

    Actions: 0 = left (clamped at state 0), 1 = right.  The default horizon is
    twice the shortest path so that a uniform random policy usually fails.
    """

    name = "sparse_chain"
    n_actions = 2

    def __init__(self, n_states: int = 5, horizon: int | None = None):
        if n_states < 2:
            raise ValueError("SparseChain needs at least 2 states")
        super().__init__(2 * (n_states - 1) if horizon is None else horizon)
        self.n_states = n_states
        self.observation_dim = n_states
        self._eye = np.eye(n_states)
        self.pos = 0

    def _config(self):
        return (self.name, self.horizon, self.n_states)

    def _reset_state(self):
        self.pos = 0

    def _transition(self, action):
        a = int(action)
        if a not in (0, 1):
            raise EnvContractError(f"SparseChain action must be 0 or 1, got {action!r}")
        self.pos = max(0, self.pos - 1) if a == 0 else self.pos + 1
        goal = self.pos == self.n_states - 1
        return (1.0 if goal else 0.0), goal

    def _observe(self):
        return self._eye[self.pos].copy()

    def _get_state(self):
        return (self.pos,)

    def _set_state(self, state):
        (self.pos,) = state

    def to_mdp(self, gamma: float) -> "TabularMDP":
        S = self.n_states
        P = np.zeros((S, 2, S))
        R = np.zeros((S, 2))
        goal = S - 1
        for s in range(S):
            if s == goal:
                P[s, :, s] = 1.0
                continue
            P[s, 0, max(0, s - 1)] = 1.0
            P[s, 1, s + 1] = 1.0
            R[s, 1] = 1.0 if s + 1 == goal else 0.0
        return TabularMDP(S, 2, P, R, gamma, frozenset({goal}))


class NoisyGrid(Env):
    """Square gridworld from the top-left corner to the bottom-right goal.

    With probability ``slip`` the chosen move is replaced by a uniformly random
    one.  Entering the goal pays ``goal_reward``; every other step pays
    ``step_penalty``.  Actions: 0 up, 1 down, 2 left, 3 right.
    """

    name = "noisy_grid"
    n_actions = 4
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, size: int = 5, slip: float = 0.1, goal_reward: float = 1.0,
                 step_penalty: float = -0.01, horizon: int = DEFAULT_HORIZON):
        super().__init__(horizon)
        if size < 2 or not 0.0 <= slip <= 1.0:
            raise ValueError("NoisyGrid needs size >= 2 and slip in [0, 1]")
        self.size = size
        self.slip = float(slip)
        self.goal_reward = float(goal_reward)
        self.step_penalty = float(step_penalty)
        self.observation_dim = size * size
        self._eye = np.eye(size * size)
        self.cell = 0

    def _config(self):
        return (self.name, self.horizon, self.size, self.slip, self.goal_reward, self.step_penalty)

    @property
    def goal(self) -> int:
        return self.size * self.size - 1

    def _move(self, cell: int, a: int) -> int:
        r, c = divmod(cell, self.size)
        dr, dc = self.MOVES[a]
        r = min(max(r + dr, 0), self.size - 1)
        c = min(max(c + dc, 0), self.size - 1)
        return r * self.size + c

    def _reset_state(self):
        self.cell = 0

    def _transition(self, action):
        a = int(action)
        if not 0 <= a < 4:
            raise EnvContractError(f"NoisyGrid action must be in 0..3, got {action!r}")
        if self._rng.random() < self.slip:
            a = int(self._rng.integers(4))
        self.cell = self._move(self.cell, a)
        goal = self.cell == self.goal
        return (self.goal_reward if goal else self.step_penalty), goal

    def _observe(self):
        return self._eye[self.cell].copy()

    def _get_state(self):
        return (self.cell,)

    def _set_state(self, state):
        (self.cell,) = state

    def to_mdp(self, gamma: float) -> "TabularMDP":
        S, A = self.size * self.size, 4
        P = np.zeros((S, A, S))
        for s in range(S):
            if s == self.goal:
                P[s, :, s] = 1.0
                continue
            for a in range(A):
                P[s, a, self._move(s, a)] += 1.0 - self.slip
                for b in range(A):
                    P[s, a, self._move(s, b)] += self.slip / A
        r_next = np.full(S, self.step_penalty)
        r_next[self.goal] = self.goal_reward
        R = P @ r_next
        R[self.goal] = 0.0
        return TabularMDP(S, A, P, R, gamma, frozenset({self.goal}))


class PointMass1D(Env):
    """Force-controlled point on [-1, 1]; reward is minus the distance to ``target``.

    Observation is ``(position, velocity / max_speed)``, both in [-1, 1].  The
    start position is drawn uniformly from the environment's seeded RNG.
    """

    name = "point_mass_1d"
    n_actions = None
    action_dim = 1
    observation_dim = 2

    def __init__(self, target: float = 0.0, dt: float = 0.1, max_force: float = 1.0,
                 max_speed: float = 2.0, horizon: int = DEFAULT_HORIZON):
        super().__init__(horizon)
        self.target = float(target)
        self.dt = float(dt)
        self.max_force = float(max_force)
        self.max_speed = float(max_speed)
        self.x = 0.0
        self.v = 0.0

    def _config(self):
        return (self.name, self.horizon, self.target, self.dt, self.max_force, self.max_speed)

    def _reset_state(self):
        self.x = float(self._rng.uniform(-1.0, 1.0))
        self.v = 0.0

    def _transition(self, action):
        f = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -self.max_force, self.max_force))
        v = min(max(self.v + f * self.dt, -self.max_speed), self.max_speed)
        x = self.x + v * self.dt
        if x > 1.0 or x < -1.0:
            x = min(max(x, -1.0), 1.0)
            v = 0.0
        self.x, self.v = x, v
        return -abs(self.x - self.target), False

    def _observe(self):
        return np.array([self.x, self.v / self.max_speed])

    def _get_state(self):
        return (self.x, self.v)

    def _set_state(self, state):
        self.x, self.v = state


ENVIRONMENTS = {
    "sparse_chain": SparseChain,
    "noisy_grid": NoisyGrid,
    "point_mass_1d": PointMass1D,
}
_ALIASES = {"sparsechain": "sparse_chain", "noisygrid": "noisy_grid", "pointmass1d": "point_mass_1d"}


def make_env(name: str, params: dict | None = None) -> Env:
    key = _ALIASES.get(name.lower().replace("_", ""), name)
    try:
        cls = ENVIRONMENTS[key]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**(params or {}))


# ---------------------------------------------------------------------------
# tabular oracle


@dataclass
class TabularMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A), expected immediate reward
    gamma: float
    terminal: frozenset = frozenset()

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        S, A = self.n_states, self.n_actions
        if self.transition.shape != (S, A, S) or self.reward.shape != (S, A):
            raise ValueError("transition must be (S, A, S) and reward (S, A)")
        if not np.allclose(self.transition.sum(axis=2), 1.0, rtol=0.0, atol=1e-12):
            raise ValueError("each P(.|s,a) must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def live_mask(self) -> np.ndarray:
        mask = np.ones(self.n_states)
        for s in self.terminal:
            mask[s] = 0.0
        return mask

    def q_values(self, values: np.ndarray, gamma: float | None = None) -> np.ndarray:
        g = self.gamma if gamma is None else gamma
        return self.reward + g * self.transition @ values


def value_iteration(mdp: TabularMDP, tolerance: float = 1e-10, max_iter: int = 100_000):
    """Optimal values and greedy policy; terminal states are worth zero."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    live = mdp.live_mask()
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = mdp.q_values(V).max(axis=1) * live
        if np.max(np.abs(V_new - V)) <= tolerance:
            V = V_new
            break
        V = V_new
    policy = np.argmax(mdp.q_values(V), axis=1)
    return V, policy


def optimal_episode_return(env: Env, start_state: int = 0) -> float:
    """Best expected undiscounted episode return within the env's horizon (finite-horizon DP)."""
    mdp = env.to_mdp(0.5)  # gamma unused below
    live = mdp.live_mask()
    V = np.zeros(mdp.n_states)
    for _ in range(env.horizon):
        V = (mdp.reward + mdp.transition @ V).max(axis=1) * live
    return float(V[start_state])
