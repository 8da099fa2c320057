"""Random finite instances for fuzzing the exact and equilibrium solvers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import REWARD_FAMILIES, ExplicitKernel, FiniteSpace, TabularRewards, TicProblem


@dataclass(frozen=True)
class RandomInstanceSpec:
    """Ranges (inclusive) for a random finite problem.

    ``sparsity`` is the probability that a kernel entry is zeroed (each row
    keeps at least one successor). ``param_range`` bounds the family
    parameter: ``h`` for hyperbolic, ``gamma`` for state-dependent, ``c`` for
    quadratic-G; it is ignored for the TC family.
    """

    family: str = "tc"
    horizon: tuple[int, int] = (1, 4)
    n_states: tuple[int, int] = (1, 4)
    n_actions: tuple[int, int] = (2, 3)
    sparsity: float = 0.3
    param_range: tuple[float, float] = (0.5, 2.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in REWARD_FAMILIES:
            raise ValueError(f"unknown reward family {self.family!r}")
        for name in ("horizon", "n_states", "n_actions"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 1 <= low <= high")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _distinct_values(rng: np.random.Generator, n: int, positive: bool) -> np.ndarray:
    pool = np.arange(1, 21) if positive else np.arange(-10, 11)
    return np.sort(rng.choice(pool, size=n, replace=False)) * 0.5


def _kernel_slice(rng: np.random.Generator, nx: int, nu: int, nn: int, sparsity: float) -> np.ndarray:
    w = rng.random((nx, nu, nn))
    mask = rng.random((nx, nu, nn)) < sparsity
    keep = rng.integers(nn, size=(nx, nu))
    mask[np.arange(nx)[:, None], np.arange(nu)[None, :], keep] = False
    w[mask] = 0.0
    return w / w.sum(axis=2, keepdims=True)


def generate_instance(spec: RandomInstanceSpec) -> TicProblem:
    """Draw a finite problem; deterministic given ``spec.seed``.

    States of the state-dependent family are strictly positive so that the
    ``gamma / y`` scaling is defined.
    """
    rng = np.random.default_rng(spec.seed)
    T = int(rng.integers(spec.horizon[0], spec.horizon[1] + 1))
    positive = spec.family == "state_dependent"
    nx = [int(rng.integers(spec.n_states[0], spec.n_states[1] + 1)) for _ in range(T + 1)]
    nu = [int(rng.integers(spec.n_actions[0], spec.n_actions[1] + 1)) for _ in range(T)]
    states = tuple(FiniteSpace(_distinct_values(rng, n, positive)) for n in nx)
    actions = tuple(FiniteSpace(np.arange(n, dtype=float)) for n in nu)
    kernel = ExplicitKernel([_kernel_slice(rng, nx[t], nu[t], nx[t + 1], spec.sparsity) for t in range(T)])
    raw = [rng.normal(size=(nx[t], nu[t])) for t in range(T)]
    raw_final = rng.normal(size=nx[T])
    param = 0.0 if spec.family == "tc" else float(rng.uniform(*spec.param_range))
    rewards = TabularRewards(states, actions, raw, raw_final, family=spec.family, param=param)
    return TicProblem(T, states, actions, kernel, rewards)


def instance_suite(
    n: int, seed: int, families: tuple[str, ...] = REWARD_FAMILIES, **ranges: tuple[int, int]
) -> list[tuple[RandomInstanceSpec, TicProblem]]:
    """``n`` instances cycling through ``families``, with per-instance seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    out = []
    for i in range(n):
        spec = RandomInstanceSpec(family=families[i % len(families)], seed=int(seeds[i]), **ranges)
        out.append((spec, generate_instance(spec)))
    return out


def hyperbolic_chain(h: float = 1.0) -> TicProblem:
    """Fixed four-state, two-action, three-epoch chain with hyperbolic rewards.

    Action 0 keeps the state and action 1 moves one step up (capped at the
    top state); either move happens with probability 1/2, otherwise the next
    state is uniform. The uniform part keeps every state well visited, so
    tabular learners see all entries often.
    """
    T = 3
    S = FiniteSpace([1.0, 2.0, 3.0, 4.0])
    A = FiniteSpace([0.0, 1.0])
    P = np.full((4, 2, 4), 0.125)
    for x in range(4):
        P[x, 0, x] += 0.5
        P[x, 1, min(x + 1, 3)] += 0.5
    raw = np.array([[0.4, 0.0], [0.3, 0.5], [0.2, 0.6], [0.5, 0.1]])
    final = np.array([0.0, 0.4, 0.8, 0.6])
    rewards = TabularRewards([S] * 4, [A] * 3, [raw] * T, final, family="hyperbolic", param=h)
    return TicProblem(T, (S,) * 4, (A,) * 3, ExplicitKernel([P] * T, stationary=True), rewards)
