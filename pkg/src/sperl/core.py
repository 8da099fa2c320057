"""Finite-horizon time-inconsistent decision problems.

A problem is a horizon ``T``, per-time state and action spaces, a transition
model and three reward functionals:

* ``reward(tau, t, y, x, u)``: intermediate reward of epoch ``t`` as judged by
  the self at time ``tau`` who started from state ``y``;
* ``terminal(tau, y, x_T)``: terminal reward;
* ``mean_term(tau, y, z)``: nonlinear term applied to the *expected* terminal
  state ``z = E[X_T]``.

Policies are deterministic and Markov. A :class:`TabularPolicy` doubles as a
policy tail: it carries the first epoch it covers, so truncation and the
one-step concatenation ``u (+)_t tail`` are cheap structural operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

KERNEL_ATOL = 1e-12

# Fixed sub-stream keys so that a single seed fans out reproducibly.
_STREAM_KEYS = {"env": 0, "exploration": 1, "replay": 2, "eval": 3, "init": 4}


class StructureError(ValueError):
    """A policy, space or table does not have the expected shape."""


class UnsupportedError(ValueError):
    """The operation needs finite spaces or an explicit kernel."""


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Return the named sub-stream of ``seed`` (env, exploration, replay, eval, init)."""
    try:
        key = _STREAM_KEYS[name]
    except KeyError:
        raise ValueError(f"unknown stream {name!r}; expected one of {sorted(_STREAM_KEYS)}") from None
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


# ---------------------------------------------------------------------------
# Spaces
# ---------------------------------------------------------------------------


class FiniteSpace:
    """Enumerated set of real values with a fixed index order."""

    def __init__(self, values: Sequence[float]):
        arr = np.array(values, dtype=float).reshape(-1)
        if arr.size == 0:
            raise StructureError("finite space must be nonempty")
        if not np.all(np.isfinite(arr)):
            raise StructureError("finite space values must be finite")
        if np.unique(arr).size != arr.size:
            raise StructureError("finite space values must be distinct")
        arr.setflags(write=False)
        self.values = arr
        self._index = {float(v): i for i, v in enumerate(arr)}

    @property
    def size(self) -> int:
        return int(self.values.size)

    def index(self, value: float) -> int:
        try:
            return self._index[float(value)]
        except KeyError:
            raise StructureError(f"{value!r} is not a member of the space") from None

    def contains(self, value: float) -> bool:
        return float(value) in self._index

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FiniteSpace) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"FiniteSpace({self.values.tolist()})"


@dataclass(frozen=True)
class RealSpace:
    """Real interval (possibly unbounded); carries no enumeration."""

    low: float = -math.inf
    high: float = math.inf

    def contains(self, value: float) -> bool:
        return self.low <= float(value) <= self.high


Space = FiniteSpace | RealSpace


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------


class ExplicitKernel:
    """Per-time transition probabilities ``probs[t][x, u, x_next]``."""

    def __init__(self, probs: Sequence[np.ndarray], stationary: bool = False):
        mats = []
        for t, p in enumerate(probs):
            arr = np.array(p, dtype=float)
            if arr.ndim != 3:
                raise StructureError(f"kernel at t={t} must be 3-d (x, u, x_next)")
            if np.any(arr < 0):
                raise StructureError(f"kernel at t={t} has negative probabilities")
            if np.any(np.abs(arr.sum(axis=2) - 1.0) > KERNEL_ATOL):
                raise StructureError(f"kernel rows at t={t} do not sum to 1")
            arr.setflags(write=False)
            mats.append(arr)
        if stationary and any(not np.array_equal(mats[0], m) for m in mats[1:]):
            raise StructureError("stationary kernel differs across time")
        self.probs: tuple[np.ndarray, ...] = tuple(mats)
        self.stationary = stationary
        self._cdf = tuple(np.cumsum(m, axis=2) for m in mats)

    def sample_index(self, t: int, xi: int, ui: int, rng: np.random.Generator) -> int:
        cdf = self._cdf[t][xi, ui]
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(j, cdf.size - 1)


@dataclass(frozen=True)
class SamplerKernel:
    """Transition given by a sampling rule ``sample(t, x, u, rng) -> x_next``."""

    sample: Callable[[int, float, float, np.random.Generator], float]
    stationary: bool = False


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TicRewards:
    """Reward functionals of a time-inconsistent criterion.

    ``transform(tau, y, raw)`` is the optional random-reward hook: when it is
    present the environment emits a raw reward (``raw_reward(t, x, u)`` or
    ``raw_terminal(x)``) and learners apply the transform themselves.
    ``tau_free`` promises that ``reward`` and ``terminal`` ignore ``(tau, y)``.
    """

    reward: Callable[[int, int, float, float, float], float]
    terminal: Callable[[int, float, float], float]
    mean_term: Callable[[int, float, float], float]
    transform: Callable[[int, float, float], float] | None = None
    raw_reward: Callable[[int, float, float], float] | None = None
    raw_terminal: Callable[[float], float] | None = None
    tau_free: bool = False
    description: dict[str, Any] | None = None


def _zero_mean_term(tau: int, y: float, z: float) -> float:
    return 0.0


def tc_rewards(
    reward: Callable[[int, float, float], float], terminal: Callable[[float], float]
) -> TicRewards:
    """Time-consistent rewards: no dependence on ``(tau, y)`` and no mean term."""
    return TicRewards(
        reward=lambda tau, t, y, x, u: reward(t, x, u),
        terminal=lambda tau, y, x: terminal(x),
        mean_term=_zero_mean_term,
        tau_free=True,
    )


REWARD_FAMILIES = ("tc", "hyperbolic", "state_dependent", "quadratic_g")


class TabularRewards(TicRewards):
    """Rewards built from raw tables plus one of the named families.

    ``raw[t][i, j]`` is the raw reward at the i-th state and j-th action of
    epoch ``t`` and ``raw_final[i]`` the raw terminal reward at the i-th
    terminal state. Families:

    * ``tc``: rewards used as is;
    * ``hyperbolic``: ``H(tau, y, R) = R / (1 + h (T - tau))``;
    * ``state_dependent``: ``H(tau, y, R) = (gamma / y) R`` (needs y != 0);
    * ``quadratic_g``: terminal ``F(x) = raw(x) - (c/2) x^2`` and mean term
      ``G(z) = (c/2) z^2``, a mean-variance style criterion.
    """

    def __init__(
        self,
        states: Sequence[FiniteSpace],
        actions: Sequence[FiniteSpace],
        raw: Sequence[np.ndarray],
        raw_final: np.ndarray,
        family: str = "tc",
        param: float = 0.0,
    ):
        if family not in REWARD_FAMILIES:
            raise ValueError(f"unknown reward family {family!r}")
        horizon = len(actions)
        raw_t = tuple(np.array(r, dtype=float) for r in raw)
        if len(raw_t) != horizon:
            raise StructureError("need one raw reward table per epoch")
        for t, r in enumerate(raw_t):
            if r.shape != (states[t].size, actions[t].size):
                raise StructureError(f"raw reward table at t={t} has shape {r.shape}")
        final = np.array(raw_final, dtype=float).reshape(-1)
        if final.size != states[horizon].size:
            raise StructureError("raw terminal table does not match terminal states")
        if family == "state_dependent" and any(np.any(s.values == 0.0) for s in states):
            raise StructureError("state-dependent family needs nonzero states")

        def raw_reward(t: int, x: float, u: float) -> float:
            return float(raw_t[t][states[t].index(x), actions[t].index(u)])

        def raw_terminal(x: float) -> float:
            return float(final[states[horizon].index(x)])

        transform: Callable[[int, float, float], float] | None
        mean_term: Callable[[int, float, float], float] = _zero_mean_term
        if family == "hyperbolic":
            h = float(param)

            def transform(tau: int, y: float, r: float) -> float:
                return r / (1.0 + h * (horizon - tau))

        elif family == "state_dependent":
            g = float(param)

            def transform(tau: int, y: float, r: float) -> float:
                return (g / y) * r

        else:
            transform = None

        if family == "quadratic_g":
            c = float(param)

            def terminal(tau: int, y: float, x: float) -> float:
                return raw_terminal(x) - 0.5 * c * x * x

            def mean_term(tau: int, y: float, z: float) -> float:
                return 0.5 * c * z * z

        elif transform is not None:

            def terminal(tau: int, y: float, x: float) -> float:
                return transform(tau, y, raw_terminal(x))

        else:

            def terminal(tau: int, y: float, x: float) -> float:
                return raw_terminal(x)

        if transform is not None:

            def reward(tau: int, t: int, y: float, x: float, u: float) -> float:
                return transform(tau, y, raw_reward(t, x, u))

        else:

            def reward(tau: int, t: int, y: float, x: float, u: float) -> float:
                return raw_reward(t, x, u)

        super().__init__(
            reward=reward,
            terminal=terminal,
            mean_term=mean_term,
            transform=transform,
            raw_reward=raw_reward,
            raw_terminal=raw_terminal,
            tau_free=family in ("tc", "quadratic_g"),
            description={"family": family, "param": float(param)},
        )
        object.__setattr__(self, "raw_tables", raw_t)
        object.__setattr__(self, "raw_final", final)


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TicProblem:
    """Finite-horizon time-inconsistent control problem.

    ``states`` has ``horizon + 1`` entries (times 0..T), ``actions`` has
    ``horizon`` entries (times 0..T-1).
    """

    horizon: int
    states: tuple[Space, ...]
    actions: tuple[Space, ...]
    transitions: ExplicitKernel | SamplerKernel
    rewards: TicRewards

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise StructureError("horizon must be at least 1")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        if len(self.states) != self.horizon + 1 or len(self.actions) != self.horizon:
            raise StructureError("need T+1 state spaces and T action spaces")
        if isinstance(self.transitions, ExplicitKernel):
            if not self.is_finite:
                raise StructureError("an explicit kernel needs finite spaces")
            if len(self.transitions.probs) != self.horizon:
                raise StructureError("need one kernel slice per epoch")
            for t, p in enumerate(self.transitions.probs):
                expect = (self.states[t].size, self.actions[t].size, self.states[t + 1].size)
                if p.shape != expect:
                    raise StructureError(f"kernel at t={t} has shape {p.shape}, expected {expect}")

    @property
    def is_finite(self) -> bool:
        return all(isinstance(s, FiniteSpace) for s in self.states + self.actions)

    @property
    def has_kernel(self) -> bool:
        return isinstance(self.transitions, ExplicitKernel)

    def require_finite(self) -> None:
        if not (self.is_finite and self.has_kernel):
            raise UnsupportedError("operation needs finite spaces and an explicit kernel")

    def sample_next(self, t: int, x: float, u: float, rng: np.random.Generator) -> float:
        if isinstance(self.transitions, ExplicitKernel):
            xi = self.states[t].index(x)
            ui = self.actions[t].index(u)
            j = self.transitions.sample_index(t, xi, ui, rng)
            return float(self.states[t + 1].values[j])
        return float(self.transitions.sample(t, x, u, rng))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularPolicy:
    """Deterministic Markov policy over finite spaces, stored as action indices.

    ``actions[i][x]`` is the action index used at time ``start + i`` in the
    state with index ``x``. A full policy has ``start == 0``; a tail starting
    at ``horizon`` is empty.
    """

    horizon: int
    start: int
    actions: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.horizon:
            raise StructureError("policy start outside 0..T")
        if len(self.actions) != self.horizon - self.start:
            raise StructureError(
                f"policy from t={self.start} needs {self.horizon - self.start} epochs, "
                f"got {len(self.actions)}"
            )
        frozen = []
        for a in self.actions:
            arr = np.array(a, dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "actions", tuple(frozen))

    @classmethod
    def constant(cls, problem: TicProblem, index: int = 0) -> "TabularPolicy":
        problem.require_finite()
        return cls(
            problem.horizon,
            0,
            tuple(np.full(problem.states[t].size, index, dtype=np.int64) for t in range(problem.horizon)),
        )

    @property
    def times(self) -> range:
        return range(self.start, self.horizon)

    def at(self, t: int) -> np.ndarray:
        """Action-index vector used at time ``t``."""
        if t not in self.times:
            raise StructureError(f"policy tail does not cover t={t}")
        return self.actions[t - self.start]

    def action_index(self, t: int, xi: int) -> int:
        return int(self.at(t)[xi])

    def with_slice(self, t: int, slice_: np.ndarray) -> "TabularPolicy":
        acts = list(self.actions)
        acts[t - self.start] = np.asarray(slice_, dtype=np.int64)
        return TabularPolicy(self.horizon, self.start, tuple(acts))

    def validate(self, problem: TicProblem) -> None:
        if self.horizon != problem.horizon:
            raise StructureError("policy horizon differs from problem horizon")
        for t in self.times:
            a = self.at(t)
            if a.size != problem.states[t].size:
                raise StructureError(f"policy slice at t={t} has wrong length")
            if a.size and (a.min() < 0 or a.max() >= problem.actions[t].size):
                raise StructureError(f"policy slice at t={t} has out-of-range actions")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TabularPolicy)
            and self.horizon == other.horizon
            and self.start == other.start
            and all(np.array_equal(a, b) for a, b in zip(self.actions, other.actions))
        )

    def __hash__(self) -> int:
        return hash((self.horizon, self.start, tuple(a.tobytes() for a in self.actions)))

    def to_lists(self) -> list[list[int]]:
        return [a.tolist() for a in self.actions]


@dataclass(frozen=True)
class ParametricPolicy:
    """Policy ``u = rule(t, x, theta[t])`` with a per-time parameter vector."""

    horizon: int
    theta: tuple[np.ndarray, ...]
    rule: Callable[[int, float, np.ndarray], float]
    grad_theta: Callable[[int, float, np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if len(self.theta) != self.horizon:
            raise StructureError("need one parameter vector per epoch")
        object.__setattr__(self, "theta", tuple(np.array(th, dtype=float).reshape(-1) for th in self.theta))

    def act(self, t: int, x: float) -> float:
        return float(self.rule(t, x, self.theta[t]))

    def with_theta(self, t: int, value: np.ndarray) -> "ParametricPolicy":
        th = list(self.theta)
        th[t] = np.array(value, dtype=float).reshape(-1)
        return ParametricPolicy(self.horizon, tuple(th), self.rule, self.grad_theta)


Policy = TabularPolicy | ParametricPolicy


def truncate(policy: TabularPolicy, k: int) -> TabularPolicy:
    """Restriction of ``policy`` to epochs ``k..T-1``."""
    if not policy.start <= k <= policy.horizon - 1:
        raise IndexError(f"truncation index {k} outside {policy.start}..{policy.horizon - 1}")
    return TabularPolicy(policy.horizon, k, policy.actions[k - policy.start :])


def empty_tail(horizon: int) -> TabularPolicy:
    return TabularPolicy(horizon, horizon, ())


def concat(u: int, t: int, tail: TabularPolicy, n_states: int) -> TabularPolicy:
    """Act with action index ``u`` at time ``t`` in every state, then follow ``tail``.

    ``tail`` must start at ``t + 1`` (the empty tail when ``t == T - 1``).
    """
    if tail.start != t + 1:
        raise StructureError(f"tail starts at {tail.start}, expected {t + 1}")
    head = np.full(n_states, u, dtype=np.int64)
    return TabularPolicy(tail.horizon, t, (head,) + tail.actions)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonGreedy:
    """With probability ``epsilon`` pick a uniformly random action."""

    epsilon: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class LambdaUniform:
    """Replace the policy action ``a`` by a draw from ``Uniform(a - radius, a + radius)``."""

    radius: float

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")


Exploration = EpsilonGreedy | LambdaUniform


@dataclass
class Trajectory:
    states: list[float] = field(default_factory=list)
    actions: list[float] = field(default_factory=list)
    raw_rewards: list[float] = field(default_factory=list)
    state_index: list[int] = field(default_factory=list)
    action_index: list[int] = field(default_factory=list)


def rollout(
    problem: TicProblem,
    policy: Policy,
    x0: float,
    rng: np.random.Generator,
    exploration: Exploration | None = None,
) -> Trajectory:
    """Generate ``(X_0, U_0, ..., U_{T-1}, X_T)`` under ``policy``.

    Finite problems with a tabular policy also record state and action
    indices and, when the rewards expose raw values, the raw reward stream
    (one per epoch plus the terminal one).
    """
    T = problem.horizon
    traj = Trajectory()
    finite = problem.is_finite
    if not problem.states[0].contains(x0):
        raise StructureError(f"initial state {x0!r} is not in the time-0 space")
    x = float(x0)
    for t in range(T):
        if isinstance(policy, TabularPolicy):
            xi = problem.states[t].index(x)
            ui = policy.action_index(t, xi)
            if isinstance(exploration, EpsilonGreedy) and rng.random() < exploration.epsilon:
                ui = int(rng.integers(problem.actions[t].size))
            elif isinstance(exploration, LambdaUniform):
                raise UnsupportedError("uniform exploration needs real-valued actions")
            u = float(problem.actions[t].values[ui])
            traj.state_index.append(xi)
            traj.action_index.append(ui)
        else:
            u = policy.act(t, x)
            if isinstance(exploration, LambdaUniform):
                u = float(rng.uniform(u - exploration.radius, u + exploration.radius))
            elif isinstance(exploration, EpsilonGreedy) and rng.random() < exploration.epsilon:
                space = problem.actions[t]
                if not isinstance(space, FiniteSpace):
                    raise UnsupportedError("epsilon-greedy needs a finite action space")
                u = float(space.values[rng.integers(space.size)])
        traj.states.append(x)
        traj.actions.append(u)
        if problem.rewards.raw_reward is not None:
            traj.raw_rewards.append(problem.rewards.raw_reward(t, x, u))
        x = problem.sample_next(t, x, u, rng)
    traj.states.append(x)
    if finite:
        traj.state_index.append(problem.states[T].index(x))
    if problem.rewards.raw_terminal is not None:
        traj.raw_rewards.append(problem.rewards.raw_terminal(x))
    return traj


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def problem_to_dict(problem: TicProblem) -> dict[str, Any]:
    """Structured document for a finite problem with tabular rewards."""
    problem.require_finite()
    rewards = problem.rewards
    if not isinstance(rewards, TabularRewards):
        raise UnsupportedError("only tabular reward families are serializable")
    assert isinstance(problem.transitions, ExplicitKernel)
    return {
        "horizon": problem.horizon,
        "states": [s.values.tolist() for s in problem.states],  # type: ignore[union-attr]
        "actions": [a.values.tolist() for a in problem.actions],  # type: ignore[union-attr]
        "kernel": [p.tolist() for p in problem.transitions.probs],
        "stationary": problem.transitions.stationary,
        "rewards": {
            "family": rewards.description["family"],  # type: ignore[index]
            "param": rewards.description["param"],  # type: ignore[index]
            "raw": [r.tolist() for r in rewards.raw_tables],  # type: ignore[attr-defined]
            "raw_final": rewards.raw_final.tolist(),  # type: ignore[attr-defined]
        },
    }


def problem_from_dict(doc: dict[str, Any]) -> TicProblem:
    states = tuple(FiniteSpace(v) for v in doc["states"])
    actions = tuple(FiniteSpace(v) for v in doc["actions"])
    rw = doc["rewards"]
    rewards = TabularRewards(
        states,
        actions,
        [np.array(r, dtype=float) for r in rw["raw"]],
        np.array(rw["raw_final"], dtype=float),
        family=rw["family"],
        param=rw["param"],
    )
    kernel = ExplicitKernel([np.array(p, dtype=float) for p in doc["kernel"]], doc.get("stationary", False))
    return TicProblem(int(doc["horizon"]), states, actions, kernel, rewards)
