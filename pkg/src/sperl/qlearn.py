"""Tabular equilibrium Q-learning.

Each episode draws an epsilon-greedy trajectory under the current greedy
policy and then walks it backwards. At epoch ``t`` it nudges, in this order,

* ``r[t][(tau, m)][x, u, y]`` for every earlier self ``(tau, y = X_tau)`` on the
  trajectory prefix and every reward epoch ``m >= t``,
* ``f[t][tau][x, u, y]`` for the same selves,
* ``g[t][x, u]``,
* ``Q[t][x, u]``,

towards their single-sample targets, and then improves the greedy action at
``(t, X_t)`` with the consistent tie-break. Estimates share the layout of
:class:`sperl.exact.ValueTables`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .bpi import EPS_TIE, improve_action, spe_check
from .core import EpsilonGreedy, FiniteSpace, TabularPolicy, TicProblem, rng_stream, rollout
from .exact import ValueTables


@dataclass(frozen=True)
class QLearnConfig:
    """Hyperparameters of :func:`q_learning_run`.

    ``schedule="visits"`` replaces the constant step by ``1 / N`` where ``N``
    counts visits of ``(t, x, u)``. ``check_every`` is the stability-check
    period; with ``stop_when_stable`` the run ends at the first check where
    the greedy policy over all states is unchanged since the previous check.
    ``spe_every`` logs the exact SPE-violation count of the greedy policy
    every so many episodes (0 disables it).
    """

    alpha: float = 0.05
    epsilon: float = 0.1
    episodes: int = 20_000
    eps_tie: float = EPS_TIE
    seed: int = 0
    init_value: float = 0.0
    schedule: Literal["constant", "visits"] = "constant"
    check_every: int = 100
    stop_when_stable: bool = False
    spe_every: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.episodes < 1:
            raise ValueError("episode cap must be at least 1")
        if self.check_every < 1:
            raise ValueError("check_every must be at least 1")
        if self.schedule not in ("constant", "visits"):
            raise ValueError("schedule must be 'constant' or 'visits'")


def init_estimates(problem: TicProblem, value: float = 0.0) -> ValueTables:
    """Constant-initialized tables over the triangular index region."""
    problem.require_finite()
    T = problem.horizon
    tables = ValueTables.empty(T)
    for t in range(T):
        nx, nu = problem.states[t].size, problem.actions[t].size  # type: ignore[union-attr]
        tables.Q[t] = np.full((nx, nu), value)
        tables.g[t] = np.full((nx, nu), value)
        tables.f[t] = [np.full((nx, nu, problem.states[tau].size), value) for tau in range(t + 1)]  # type: ignore[union-attr]
        tables.r[t] = {
            (tau, m): np.full((nx, nu, problem.states[tau].size), value)  # type: ignore[union-attr]
            for tau in range(t + 1)
            for m in range(t, T)
        }
    return tables


def greedy_policy(tables: ValueTables, previous: TabularPolicy | None = None, eps: float = EPS_TIE) -> TabularPolicy:
    """Greedy policy of ``Q``; with ``previous`` the old action survives ties."""
    acts = []
    for t in range(tables.horizon):
        q = tables.q(t)
        if previous is None:
            acts.append(np.argmax(q, axis=1))
        else:
            old = previous.at(t)
            acts.append(np.array([improve_action(q[x], int(old[x]), np.arange(q.shape[1]), eps) for x in range(q.shape[0])]))
    return TabularPolicy(tables.horizon, 0, tuple(acts))


@dataclass(frozen=True)
class Step:
    """One transition of an episode, by index, with the states ``X_0..X_t`` seen so far."""

    t: int
    x: int
    u: int
    x_next: int
    prefix: tuple[int, ...]
    raw_reward: float | None = None
    raw_terminal: float | None = None


def td_update(
    problem: TicProblem,
    est: ValueTables,
    step: Step,
    policy: TabularPolicy,
    alpha: float,
) -> float:
    """Move the four tables at ``(step.t, step.x, step.u)`` towards their targets.

    ``policy`` supplies the next-epoch action used for bootstrapping. Returns
    ``|xi_Q - Q_old|`` for the updated entry.
    """
    T = problem.horizon
    t, x, u, xn = step.t, step.x, step.u, step.x_next
    rw = problem.rewards
    H = rw.transform
    xs = problem.states[t].values  # type: ignore[union-attr]
    uv = float(problem.actions[t].values[u])  # type: ignore[union-attr]
    xv = float(xs[x])
    xn_val = float(problem.states[t + 1].values[xn])  # type: ignore[union-attr]
    last = t == T - 1
    a = -1 if last else policy.action_index(t + 1, xn)
    r_t, f_t, g_t, q_t = est.r[t], est.f[t], est.g[t], est.Q[t]
    assert r_t is not None and f_t is not None and g_t is not None and q_t is not None
    r_n = est.r[t + 1] if not last else None
    f_n = est.f[t + 1] if not last else None

    for tau in range(t, -1, -1):
        y = step.prefix[tau]
        yv = float(problem.states[tau].values[y])  # type: ignore[union-attr]
        for m in range(t, T):
            if m == t:
                if H is not None and step.raw_reward is not None:
                    xi = H(tau, yv, step.raw_reward)
                else:
                    xi = rw.reward(tau, t, yv, xv, uv)
            else:
                assert r_n is not None
                xi = r_n[(tau, m)][xn, a, y]
            tab = r_t[(tau, m)]
            tab[x, u, y] += alpha * (xi - tab[x, u, y])
        if last:
            if H is not None and step.raw_terminal is not None:
                xi = H(tau, yv, step.raw_terminal)
            else:
                xi = rw.terminal(tau, yv, xn_val)
        else:
            assert f_n is not None
            xi = f_n[tau][xn, a, y]
        f_t[tau][x, u, y] += alpha * (xi - f_t[tau][x, u, y])

    G = rw.mean_term
    if last:
        g_t[x, u] += alpha * (xn_val - g_t[x, u])
        xi_q = r_t[(t, t)][x, u, x] + f_t[t][x, u, x] + G(t, xv, g_t[x, u])
    else:
        g_n, q_n = est.g[t + 1], est.Q[t + 1]
        assert r_n is not None and f_n is not None and g_n is not None and q_n is not None
        g_t[x, u] += alpha * (g_n[xn, a] - g_t[x, u])
        delta_r = sum(r_n[(t + 1, m)][xn, a, xn] - r_t[(t, m)][x, u, x] for m in range(t + 1, T))
        delta_f = f_n[t + 1][xn, a, xn] - f_t[t][x, u, x]
        delta_g = G(t + 1, xn_val, g_n[xn, a]) - G(t, xv, g_t[x, u])
        xi_q = r_t[(t, t)][x, u, x] + q_n[xn, a] - delta_r - delta_f - delta_g
    err = abs(xi_q - q_t[x, u])
    q_t[x, u] += alpha * (xi_q - q_t[x, u])
    return float(err)


@dataclass
class QLearnLog:
    episode: list[int] = field(default_factory=list)
    policy_changes: list[int] = field(default_factory=list)
    max_td_error: list[float] = field(default_factory=list)
    spe_violations: list[int | None] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "policy_changes", "max_td_error", "spe_violations"])
        for row in zip(self.episode, self.policy_changes, self.max_td_error, self.spe_violations):
            e, c, d, s = row
            w.writerow([e, c, f"{d:.17g}", "" if s is None else s])
        return buf.getvalue()


@dataclass
class QLearnResult:
    estimates: ValueTables
    policy: TabularPolicy
    log: QLearnLog
    converged: bool
    episodes: int
    visits: list[np.ndarray]


def q_learning_run(problem: TicProblem, cfg: QLearnConfig) -> QLearnResult:
    """Run episodes until the greedy policy is stable (if requested) or the cap is hit.

    Initial states are drawn uniformly from the time-0 space. ``converged``
    reports whether the last stability check found an unchanged policy.
    """
    problem.require_finite()
    est = init_estimates(problem, cfg.init_value)
    policy = greedy_policy(est)
    env = rng_stream(cfg.seed, "env")
    explore = EpsilonGreedy(cfg.epsilon)
    visits = [np.zeros((problem.states[t].size, problem.actions[t].size), dtype=np.int64) for t in range(problem.horizon)]  # type: ignore[union-attr]
    log = QLearnLog()
    states0 = problem.states[0]
    assert isinstance(states0, FiniteSpace)
    snapshot = policy
    stable = False
    episode = 0
    for episode in range(1, cfg.episodes + 1):
        x0 = float(states0.values[env.integers(states0.size)])
        traj = rollout(problem, policy, x0, env, explore)
        prefix = tuple(traj.state_index)
        changes, worst = 0, 0.0
        for t in reversed(range(problem.horizon)):
            x, u = traj.state_index[t], traj.action_index[t]
            visits[t][x, u] += 1
            alpha = cfg.alpha if cfg.schedule == "constant" else 1.0 / visits[t][x, u]
            step = Step(
                t=t,
                x=x,
                u=u,
                x_next=traj.state_index[t + 1],
                prefix=prefix[: t + 1],
                raw_reward=traj.raw_rewards[t] if traj.raw_rewards else None,
                raw_terminal=traj.raw_rewards[-1] if traj.raw_rewards and t == problem.horizon - 1 else None,
            )
            worst = max(worst, td_update(problem, est, step, policy, alpha))
            old = policy.action_index(t, x)
            new = improve_action(est.q(t)[x], old, np.arange(est.q(t).shape[1]), cfg.eps_tie)
            if new != old:
                sl = policy.at(t).copy()
                sl[x] = new
                policy = policy.with_slice(t, sl)
                changes += 1
        log.episode.append(episode)
        log.policy_changes.append(changes)
        log.max_td_error.append(worst)
        if cfg.spe_every and episode % cfg.spe_every == 0:
            log.spe_violations.append(spe_check(problem, policy, cfg.eps_tie).violations)
        else:
            log.spe_violations.append(None)
        if episode % cfg.check_every == 0:
            greedy = greedy_policy(est, policy, cfg.eps_tie)
            stable = greedy == policy and policy == snapshot
            snapshot = policy = greedy
            if stable and cfg.stop_when_stable:
                break
    return QLearnResult(est, policy, log, stable, episode, visits)
