"""Exact policy evaluation for finite time-inconsistent problems.

The evaluator runs the backward recursions for the adjustment functions

* ``r[t][(tau, m)][x, u, y]``: expected reward of epoch ``m`` judged by self ``(tau, y)``,
* ``f[t][tau][x, u, y]``: expected terminal reward judged by self ``(tau, y)``,
* ``g[t][x, u]``: expected terminal state,

and then for the action value ``Q[t][x, u]``, whose recursion corrects the
plain Bellman backup by the change of evaluator between ``t`` and ``t + 1``.
Only the triangular index region ``tau <= t <= m`` is stored.

:func:`oracle_value` is an independent route that enumerates every trajectory
and evaluates the criterion by definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import ExplicitKernel, FiniteSpace, StructureError, TabularPolicy, TicProblem

DEFAULT_MAX_LEAVES = 10**7


class CapacityError(RuntimeError):
    """Trajectory enumeration exceeded the configured leaf cap."""


class DependencyError(RuntimeError):
    """A required table has not been computed."""


@dataclass
class ValueTables:
    """Adjustment tables and action values of one policy.

    Layout (all arrays indexed by state/action *indices*):

    * ``Q[t]``, ``g[t]``: shape ``(|X_t|, |U_t|)``;
    * ``f[t][tau]``: shape ``(|X_t|, |U_t|, |X_tau|)`` for ``tau <= t``;
    * ``r[t][(tau, m)]``: shape ``(|X_t|, |U_t|, |X_tau|)`` for ``tau <= t <= m <= T-1``.
    """

    horizon: int
    r: list[dict[tuple[int, int], np.ndarray] | None] = field(default_factory=list)
    f: list[list[np.ndarray] | None] = field(default_factory=list)
    g: list[np.ndarray | None] = field(default_factory=list)
    Q: list[np.ndarray | None] = field(default_factory=list)

    @classmethod
    def empty(cls, horizon: int) -> "ValueTables":
        return cls(horizon, [None] * horizon, [None] * horizon, [None] * horizon, [None] * horizon)

    def has_adjustments(self, t: int) -> bool:
        return self.r[t] is not None and self.f[t] is not None and self.g[t] is not None

    def q(self, t: int) -> np.ndarray:
        q = self.Q[t]
        if q is None:
            raise DependencyError(f"Q at t={t} has not been evaluated")
        return q

    def all_finite(self) -> bool:
        arrays: list[np.ndarray] = []
        for t in range(self.horizon):
            arrays += [a for a in (self.Q[t], self.g[t]) if a is not None]
            arrays += list(self.f[t] or [])
            arrays += list((self.r[t] or {}).values())
        return all(np.all(np.isfinite(a)) for a in arrays)

    def to_dict(self) -> dict[str, Any]:
        def arr(a: np.ndarray | None) -> Any:
            return None if a is None else a.tolist()

        return {
            "horizon": self.horizon,
            "Q": [arr(q) for q in self.Q],
            "g": [arr(g) for g in self.g],
            "f": [None if ft is None else [a.tolist() for a in ft] for ft in self.f],
            "r": [
                None if rt is None else [{"tau": k[0], "m": k[1], "values": v.tolist()} for k, v in sorted(rt.items())]
                for rt in self.r
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ValueTables":
        def arr(a: Any) -> np.ndarray | None:
            return None if a is None else np.array(a, dtype=float)

        return cls(
            horizon=int(doc["horizon"]),
            Q=[arr(q) for q in doc["Q"]],
            g=[arr(g) for g in doc["g"]],
            f=[None if ft is None else [np.array(a, dtype=float) for a in ft] for ft in doc["f"]],
            r=[
                None if rt is None else {(e["tau"], e["m"]): np.array(e["values"], dtype=float) for e in rt}
                for rt in doc["r"]
            ],
        )


# ---------------------------------------------------------------------------
# Reward grids
# ---------------------------------------------------------------------------


def _values(space: Any) -> np.ndarray:
    assert isinstance(space, FiniteSpace)
    return space.values


def reward_grid(problem: TicProblem, tau: int, t: int) -> np.ndarray:
    """``R(tau, t, y, x, u)`` on the grid, shape ``(|X_t|, |U_t|, |X_tau|)``."""
    xs, us, ys = _values(problem.states[t]), _values(problem.actions[t]), _values(problem.states[tau])
    R = problem.rewards.reward
    out = np.empty((xs.size, us.size, ys.size))
    for i, x in enumerate(xs):
        for j, u in enumerate(us):
            for k, y in enumerate(ys):
                out[i, j, k] = R(tau, t, float(y), float(x), float(u))
    return out


def terminal_grid(problem: TicProblem, tau: int) -> np.ndarray:
    """``F(tau, y, x_T)`` on the grid, shape ``(|X_T|, |X_tau|)``."""
    xs, ys = _values(problem.states[problem.horizon]), _values(problem.states[tau])
    F = problem.rewards.terminal
    return np.array([[F(tau, float(y), float(x)) for y in ys] for x in xs]).reshape(xs.size, ys.size)


def mean_term_grid(problem: TicProblem, t: int, z: np.ndarray) -> np.ndarray:
    """``G(t, x, z[x, ...])`` with the evaluator's own state ``y = x`` along axis 0."""
    xs = _values(problem.states[t])
    G = problem.rewards.mean_term
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape)
    for idx in np.ndindex(z.shape):
        out[idx] = G(t, float(xs[idx[0]]), float(z[idx]))
    return out


# ---------------------------------------------------------------------------
# Backward recursions
# ---------------------------------------------------------------------------


def _kernel(problem: TicProblem, t: int) -> np.ndarray:
    assert isinstance(problem.transitions, ExplicitKernel)
    return problem.transitions.probs[t]


def _on_policy(arr: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Select ``arr[s, pi(s), ...]`` for every next state ``s``."""
    return arr[np.arange(actions.size), actions]


def _diag(arr: np.ndarray) -> np.ndarray:
    """Select ``arr[x, u, x]``: an own-time table read at ``y = x``."""
    n = arr.shape[0]
    return arr[np.arange(n), :, np.arange(n)]


def _expect(P: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Kernel expectation ``sum_s P[x, u, s] values[s, ...]``."""
    return np.tensordot(P, values, axes=([2], [0]))


def _check_inputs(problem: TicProblem, policy: TabularPolicy) -> None:
    problem.require_finite()
    policy.validate(problem)
    if policy.start > 1:
        raise StructureError("evaluation needs a policy covering epochs 1..T-1")


def adjustments_at(problem: TicProblem, policy: TabularPolicy, tables: ValueTables, t: int) -> None:
    """Fill ``r[t]``, ``f[t]``, ``g[t]`` from the time ``t + 1`` tables."""
    T = problem.horizon
    P = _kernel(problem, t)
    last = t == T - 1
    if not last and not tables.has_adjustments(t + 1):
        raise DependencyError(f"adjustments at t={t + 1} are missing")
    nxt = None if last else policy.at(t + 1)

    r_t: dict[tuple[int, int], np.ndarray] = {}
    for tau in range(t + 1):
        r_t[(tau, t)] = reward_grid(problem, tau, t)
        for m in range(t + 1, T):
            assert nxt is not None
            r_t[(tau, m)] = _expect(P, _on_policy(tables.r[t + 1][(tau, m)], nxt))  # type: ignore[index]

    f_t: list[np.ndarray] = []
    for tau in range(t + 1):
        if last:
            f_t.append(_expect(P, terminal_grid(problem, tau)))
        else:
            assert nxt is not None
            f_t.append(_expect(P, _on_policy(tables.f[t + 1][tau], nxt)))  # type: ignore[index]

    if last:
        g_t = _expect(P, _values(problem.states[T]))
    else:
        assert nxt is not None
        g_t = _expect(P, _on_policy(tables.g[t + 1], nxt))  # type: ignore[arg-type]

    tables.r[t], tables.f[t], tables.g[t] = r_t, f_t, g_t


def q_at(problem: TicProblem, policy: TabularPolicy, tables: ValueTables, t: int) -> None:
    """Fill ``Q[t]`` from the adjustment tables at ``t`` and ``t + 1``."""
    T = problem.horizon
    if not tables.has_adjustments(t):
        raise DependencyError(f"adjustments at t={t} are missing")
    r_t, f_t, g_t = tables.r[t], tables.f[t], tables.g[t]
    assert r_t is not None and f_t is not None and g_t is not None
    own_reward = _diag(r_t[(t, t)])
    own_terminal = _diag(f_t[t])
    own_mean = mean_term_grid(problem, t, g_t)
    if t == T - 1:
        tables.Q[t] = own_reward + own_terminal + own_mean
        return

    if tables.Q[t + 1] is None or not tables.has_adjustments(t + 1):
        raise DependencyError(f"tables at t={t + 1} are missing")
    P = _kernel(problem, t)
    nxt = policy.at(t + 1)
    n_next = nxt.size
    idx = np.arange(n_next)
    r_n, f_n, g_n = tables.r[t + 1], tables.f[t + 1], tables.g[t + 1]
    assert r_n is not None and f_n is not None and g_n is not None

    cont = _expect(P, tables.q(t + 1)[idx, nxt])
    delta_r = np.zeros_like(own_reward)
    for m in range(t + 1, T):
        delta_r += _expect(P, r_n[(t + 1, m)][idx, nxt, idx]) - _diag(r_t[(t, m)])
    delta_f = _expect(P, f_n[t + 1][idx, nxt, idx]) - own_terminal
    next_mean = mean_term_grid(problem, t + 1, g_n[idx, nxt])
    delta_g = _expect(P, next_mean) - own_mean
    tables.Q[t] = own_reward + cont - delta_r - delta_f - delta_g


def eval_adjustments(problem: TicProblem, policy: TabularPolicy) -> ValueTables:
    """Backward recursion for ``r``, ``f`` and ``g`` under ``policy``."""
    _check_inputs(problem, policy)
    tables = ValueTables.empty(problem.horizon)
    for t in reversed(range(problem.horizon)):
        adjustments_at(problem, policy, tables, t)
    return tables


def eval_q(problem: TicProblem, policy: TabularPolicy, tables: ValueTables) -> ValueTables:
    """Fill ``Q`` in ``tables`` (which must already hold the adjustments)."""
    _check_inputs(problem, policy)
    if tables.horizon != problem.horizon:
        raise DependencyError("tables were built for a different horizon")
    for t in range(problem.horizon):
        if not tables.has_adjustments(t):
            raise DependencyError(f"adjustments at t={t} are missing; run eval_adjustments first")
    for t in reversed(range(problem.horizon)):
        q_at(problem, policy, tables, t)
    return tables


def evaluate(problem: TicProblem, policy: TabularPolicy) -> ValueTables:
    """Adjustments and action values in one call."""
    return eval_q(problem, policy, eval_adjustments(problem, policy))


# ---------------------------------------------------------------------------
# DP targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Targets:
    r: float
    f: float
    g: float
    q: float


def dp_targets(
    problem: TicProblem,
    tables: ValueTables,
    policy: TabularPolicy,
    t: int,
    x: int,
    u: int,
    tau: int,
    m: int,
    y: int,
    x_next: int | None = None,
) -> Targets:
    """Targets for ``r[t][(tau, m)][x, u, y]``, ``f[t][tau][x, u, y]``, ``g[t][x, u]``, ``Q[t][x, u]``.

    With ``x_next`` given these are the single-sample (bootstrapped) targets;
    without it they are averaged over the kernel, which gives the exact
    right-hand sides of the recursions. Arguments are indices.
    """
    T = problem.horizon
    if not 0 <= t < T or not 0 <= tau <= t or not t <= m < T:
        raise IndexError(f"need 0 <= tau <= t <= m < T, got tau={tau}, t={t}, m={m}")
    if x_next is None:
        P = _kernel(problem, t)[x, u]
        parts = [
            dp_targets(problem, tables, policy, t, x, u, tau, m, y, s) for s in range(P.size) if P[s] > 0
        ]
        weights = [P[s] for s in range(P.size) if P[s] > 0]
        return Targets(
            r=float(sum(w * p.r for w, p in zip(weights, parts))),
            f=float(sum(w * p.f for w, p in zip(weights, parts))),
            g=float(sum(w * p.g for w, p in zip(weights, parts))),
            q=float(sum(w * p.q for w, p in zip(weights, parts))),
        )

    R, F, G = problem.rewards.reward, problem.rewards.terminal, problem.rewards.mean_term
    xs = _values(problem.states[t])
    us = _values(problem.actions[t])
    ys = _values(problem.states[tau])
    xn_val = float(_values(problem.states[t + 1])[x_next])
    xv, uv, yv = float(xs[x]), float(us[u]), float(ys[y])

    if not tables.has_adjustments(t):
        raise DependencyError(f"adjustments at t={t} are missing")
    r_t, f_t, g_t = tables.r[t], tables.f[t], tables.g[t]
    assert r_t is not None and f_t is not None and g_t is not None

    if t == T - 1:
        xi_r = R(tau, t, yv, xv, uv)
        xi_f = F(tau, yv, xn_val)
        xi_g = xn_val
        xi_q = r_t[(t, t)][x, u, x] + f_t[t][x, u, x] + G(t, xv, g_t[x, u])
        return Targets(float(xi_r), float(xi_f), float(xi_g), float(xi_q))

    a = policy.action_index(t + 1, x_next)
    r_n, f_n, g_n = tables.r[t + 1], tables.f[t + 1], tables.g[t + 1]
    if r_n is None or f_n is None or g_n is None or tables.Q[t + 1] is None:
        raise DependencyError(f"tables at t={t + 1} are missing")
    xi_r = R(tau, t, yv, xv, uv) if m == t else r_n[(tau, m)][x_next, a, y]
    xi_f = f_n[tau][x_next, a, y]
    xi_g = g_n[x_next, a]
    delta_r = sum(r_n[(t + 1, k)][x_next, a, x_next] - r_t[(t, k)][x, u, x] for k in range(t + 1, T))
    delta_f = f_n[t + 1][x_next, a, x_next] - f_t[t][x, u, x]
    delta_g = G(t + 1, xn_val, g_n[x_next, a]) - G(t, xv, g_t[x, u])
    xi_q = r_t[(t, t)][x, u, x] + tables.q(t + 1)[x_next, a] - delta_r - delta_f - delta_g
    return Targets(float(xi_r), float(xi_f), float(xi_g), float(xi_q))


# ---------------------------------------------------------------------------
# Enumeration oracle
# ---------------------------------------------------------------------------


def oracle_value(
    problem: TicProblem,
    policy_tail: TabularPolicy,
    t: int,
    x: int,
    max_leaves: int = DEFAULT_MAX_LEAVES,
) -> float:
    """Criterion of self ``(t, X_t = x)`` under ``policy_tail``, by trajectory enumeration.

    Every path from ``(t, x)`` is walked with its probability. Intermediate
    and terminal rewards are averaged over paths; the mean term is applied
    once, to the exact expected terminal state. ``x`` is a state index.
    """
    problem.require_finite()
    T = problem.horizon
    if policy_tail.start != t:
        raise StructureError(f"policy tail starts at {policy_tail.start}, expected {t}")
    assert isinstance(problem.transitions, ExplicitKernel)
    probs = problem.transitions.probs
    R, F, G = problem.rewards.reward, problem.rewards.terminal, problem.rewards.mean_term
    y = float(_values(problem.states[t])[x])

    reward_sum = 0.0
    terminal_sum = 0.0
    mean_state = 0.0
    leaves = 0
    stack: list[tuple[int, int, float]] = [(t, x, 1.0)]
    while stack:
        s, xi, p = stack.pop()
        xv = float(_values(problem.states[s])[xi])
        if s == T:
            leaves += 1
            if leaves > max_leaves:
                raise CapacityError(f"more than {max_leaves} trajectories from (t={t}, x={x})")
            terminal_sum += p * F(t, y, xv)
            mean_state += p * xv
            continue
        ui = policy_tail.action_index(s, xi)
        uv = float(_values(problem.actions[s])[ui])
        reward_sum += p * R(t, s, y, xv, uv)
        row = probs[s][xi, ui]
        for nxt in range(row.size - 1, -1, -1):
            if row[nxt] > 0.0:
                stack.append((s + 1, nxt, p * float(row[nxt])))
    return reward_sum + terminal_sum + G(t, y, mean_state)
