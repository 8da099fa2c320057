"""Independent reference computations shared by the test modules.

Nothing here calls the backward recursions under test: adjustments are
computed by propagating state distributions forward, and the time-consistent
optimum by textbook backward induction on the raw rewards.
"""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from sperl.core import (
    REWARD_FAMILIES,
    ExplicitKernel,
    FiniteSpace,
    TabularPolicy,
    TabularRewards,
    TicProblem,
)
from sperl.instances import RandomInstanceSpec

instance_specs = st.builds(
    RandomInstanceSpec,
    family=st.sampled_from(REWARD_FAMILIES),
    seed=st.integers(0, 2**32 - 1),
)


def finite_problem(states, actions, probs, raw, raw_final, family="tc", param=0.0) -> TicProblem:
    S = [FiniteSpace(s) for s in states]
    A = [FiniteSpace(a) for a in actions]
    rewards = TabularRewards(S, A, raw, raw_final, family=family, param=param)
    return TicProblem(len(A), tuple(S), tuple(A), ExplicitKernel(probs), rewards)


def random_policy(problem: TicProblem, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(
        problem.horizon,
        0,
        tuple(rng.integers(problem.actions[t].size, size=problem.states[t].size) for t in range(problem.horizon)),
    )


def forward_marginals(problem: TicProblem, policy: TabularPolicy, t: int, x: int, u: int) -> dict[int, np.ndarray]:
    """Distribution of ``X_s`` for ``s = t+1..T`` after acting ``u`` in ``x`` at ``t`` and then ``policy``."""
    P = problem.transitions.probs
    dist = {t + 1: np.array(P[t][x, u], dtype=float)}
    for s in range(t + 1, problem.horizon):
        nxt = np.zeros(problem.states[s + 1].size)
        acts = policy.at(s)
        for xi, p in enumerate(dist[s]):
            if p > 0:
                nxt += p * P[s][xi, acts[xi]]
        dist[s + 1] = nxt
    return dist


def adjustments_by_enumeration(problem: TicProblem, policy: TabularPolicy, t: int, x: int, u: int):
    """Definitional expectations ``r[(tau, m)][y]``, ``f[tau][y]`` and ``g`` at ``(t, x, u)``."""
    T = problem.horizon
    R, F = problem.rewards.reward, problem.rewards.terminal
    S = [s.values for s in problem.states]
    U = [a.values for a in problem.actions]
    dist = forward_marginals(problem, policy, t, x, u)
    r, f = {}, {}
    for tau in range(t + 1):
        for m in range(t, T):
            vals = np.zeros(S[tau].size)
            for yi, y in enumerate(S[tau]):
                if m == t:
                    vals[yi] = R(tau, t, y, S[t][x], U[t][u])
                else:
                    acts = policy.at(m)
                    vals[yi] = sum(p * R(tau, m, y, S[m][xi], U[m][acts[xi]]) for xi, p in enumerate(dist[m]))
            r[(tau, m)] = vals
        f[tau] = np.array([sum(p * F(tau, y, S[T][xi]) for xi, p in enumerate(dist[T])) for y in S[tau]])
    g = float(dist[T] @ S[T])
    return r, f, g


def q_by_enumeration(problem: TicProblem, policy: TabularPolicy, t: int, x: int, u: int) -> float:
    """Criterion of self ``(t, x)`` for ``u`` then ``policy``, from the forward marginals."""
    r, f, g = adjustments_by_enumeration(problem, policy, t, x, u)
    T = problem.horizon
    return sum(r[(t, m)][x] for m in range(t, T)) + f[t][x] + problem.rewards.mean_term(t, problem.states[t].values[x], g)


def classic_backward_induction(problem: TicProblem) -> list[np.ndarray]:
    """Optimal action values of a time-consistent problem from its raw reward tables."""
    rw = problem.rewards
    P = problem.transitions.probs
    V = np.array(rw.raw_final, dtype=float)
    Qs: list[np.ndarray] = [np.zeros(0)] * problem.horizon
    for t in reversed(range(problem.horizon)):
        Q = rw.raw_tables[t] + P[t] @ V
        Qs[t] = Q
        V = Q.max(axis=1)
    return Qs
