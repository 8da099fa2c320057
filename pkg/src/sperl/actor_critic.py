"""Deterministic actor-critic for time-inconsistent problems.

Critics are linear in their weights, one weight vector per table entry:
``w_Q[t]``, ``w_g[t]``, ``w_f[(t, tau)]`` and ``w_r[(t, tau, m)]``. Each
iteration collects ``B`` explored trajectories into an append-only replay
buffer (one experience per pair ``tau <= t``), then walks ``t = T-1, ..., 0``:
it fits ``r`` (all ``tau``, ``m``), ``f`` (all ``tau``), ``g`` and ``Q`` by least
squares on a minibatch, relaxes the weights towards the solution, and takes a
gradient-ascent step on the actor at ``t``.

Problems whose rewards ignore ``(tau, y)`` skip the ``r`` and ``f`` critics:
their own-time values are replaced by the sampled rewards, and the adjustment
corrections, which then have zero conditional mean, are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .core import Exploration, ParametricPolicy, TicProblem, rng_stream, rollout
from .linreg import RegressionProblem, ols_fit

log = logging.getLogger(__name__)

Solver = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _vec(fn: Callable[..., Any], *args: np.ndarray) -> np.ndarray:
    """Apply a scalar functional elementwise, using a vectorized call when it works."""
    arrays = [np.asarray(a, dtype=float) for a in args]
    n = arrays[-1].shape[0]
    try:
        out = np.asarray(fn(*arrays), dtype=float)
        if out.shape == (n,):
            return out
        if out.ndim == 0:
            return np.full(n, float(out))
    except (TypeError, ValueError, KeyError):
        pass
    return np.array([fn(*(float(a[i]) for a in arrays)) for i in range(n)], dtype=float)


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Experience:
    t: int
    tau: int
    x: float
    u: float
    y: float
    x_next: float


_COLUMNS = ("t", "tau", "x", "u", "y", "x_next")


@dataclass(frozen=True)
class Minibatch:
    t: np.ndarray
    tau: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    x_next: np.ndarray

    def __len__(self) -> int:
        return int(self.x.size)

    @classmethod
    def from_experiences(cls, rows: list[Experience]) -> "Minibatch":
        return cls(
            t=np.array([e.t for e in rows], dtype=np.int64),
            tau=np.array([e.tau for e in rows], dtype=np.int64),
            x=np.array([e.x for e in rows], dtype=float),
            u=np.array([e.u for e in rows], dtype=float),
            y=np.array([e.y for e in rows], dtype=float),
            x_next=np.array([e.x_next for e in rows], dtype=float),
        )


class ReplayBuffer:
    """Append-only experience store split into the current batch and the past."""

    def __init__(self) -> None:
        self._cols: dict[str, list[float]] = {c: [] for c in _COLUMNS}
        self._current_start = 0
        self._cache: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self._cols["t"])

    @property
    def current_start(self) -> int:
        return self._current_start

    def begin_batch(self) -> None:
        """Everything stored so far becomes past experience."""
        self._current_start = len(self)

    def add(self, e: Experience) -> None:
        if not 0 <= e.tau <= e.t:
            raise ValueError("experience needs 0 <= tau <= t")
        for c in _COLUMNS:
            self._cols[c].append(getattr(e, c))
        self._cache = None

    def columns(self) -> dict[str, np.ndarray]:
        if self._cache is None:
            self._cache = {
                c: np.array(v, dtype=np.int64 if c in ("t", "tau") else float) for c, v in self._cols.items()
            }
        return self._cache

    def experience(self, i: int) -> Experience:
        return Experience(**{c: self._cols[c][i] for c in _COLUMNS})  # type: ignore[arg-type]


def replay_sample(
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    t: int | None = None,
    tau: int | None = None,
    kappa: float = 1.0,
) -> Minibatch:
    """All matching current experiences plus ``min(kappa * |current|, |past|)`` past ones.

    Past experiences are drawn without replacement. ``None`` filters match
    everything.
    """
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    cols = buffer.columns()
    mask = np.ones(len(buffer), dtype=bool)
    if t is not None:
        mask &= cols["t"] == t
    if tau is not None:
        mask &= cols["tau"] == tau
    idx = np.flatnonzero(mask)
    current = idx[idx >= buffer.current_start]
    past = idx[idx < buffer.current_start]
    k = min(int(kappa * current.size), past.size)
    chosen = rng.choice(past, size=k, replace=False) if k > 0 else past[:0]
    sel = np.concatenate([current, np.sort(chosen)])
    return Minibatch(**{c: cols[c][sel] for c in _COLUMNS})


# ---------------------------------------------------------------------------
# Critics and model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearCritic:
    """Approximator ``features(x, u, y) @ w + offset(x, u, y)``.

    ``features`` and ``feature_grad_u`` map arrays of length ``n`` to
    ``(n, dim)`` matrices; ``offset`` is an untrained known part.
    """

    dim: int
    features: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    feature_grad_u: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    offset: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None

    def design(self, x: np.ndarray, u: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        y = x if y is None else y
        phi = np.asarray(self.features(x, u, y), dtype=float)
        return phi.reshape(np.asarray(x).size, self.dim)

    def known(self, x: np.ndarray, u: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        if self.offset is None:
            return np.zeros(np.asarray(x).size)
        y = x if y is None else y
        return np.broadcast_to(np.asarray(self.offset(x, u, y), dtype=float), np.asarray(x).shape).copy()

    def value(self, w: np.ndarray, x: np.ndarray, u: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        return self.design(x, u, y) @ w + self.known(x, u, y)

    def grad_u(self, w: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.feature_grad_u is None:
            raise ValueError("critic has no action gradient")
        g = np.asarray(self.feature_grad_u(x, u, x), dtype=float).reshape(np.asarray(x).size, self.dim)
        return g @ w


def ols_solver(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return ols_fit(RegressionProblem(targets, features)).weights


@dataclass
class AcModel:
    """Problem plus critic families and the least-squares solver.

    ``r_critic`` and ``f_critic`` may be omitted when the rewards ignore
    ``(tau, y)``. ``call_log`` records the order of updates when given.
    """

    problem: TicProblem
    q_critic: LinearCritic
    g_critic: LinearCritic
    r_critic: LinearCritic | None = None
    f_critic: LinearCritic | None = None
    solver: Solver = ols_solver
    call_log: list[tuple] | None = None

    @property
    def skips_adjustments(self) -> bool:
        return self.problem.rewards.tau_free

    def record(self, *entry: Any) -> None:
        if self.call_log is not None:
            self.call_log.append(entry)


@dataclass
class CriticWeights:
    Q: list[np.ndarray]
    g: list[np.ndarray]
    f: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    r: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, model: AcModel) -> "CriticWeights":
        T = model.problem.horizon
        w = cls(Q=[np.zeros(model.q_critic.dim) for _ in range(T)], g=[np.zeros(model.g_critic.dim) for _ in range(T)])
        if not model.skips_adjustments:
            if model.r_critic is None or model.f_critic is None:
                raise ValueError("rewards depend on (tau, y): r and f critics are required")
            for t in range(T):
                for tau in range(t + 1):
                    w.f[(t, tau)] = np.zeros(model.f_critic.dim)
                    for m in range(t, T):
                        w.r[(t, tau, m)] = np.zeros(model.r_critic.dim)
        return w

    def copy(self) -> "CriticWeights":
        return CriticWeights(
            Q=[a.copy() for a in self.Q],
            g=[a.copy() for a in self.g],
            f={k: v.copy() for k, v in self.f.items()},
            r={k: v.copy() for k, v in self.r.items()},
        )


def actor_actions(actor: ParametricPolicy, t: int, x: np.ndarray) -> np.ndarray:
    return _vec(lambda xx: actor.rule(t, xx, actor.theta[t]), np.asarray(x, dtype=float))


def _relax(old: np.ndarray, solution: np.ndarray, alpha_w: float) -> np.ndarray:
    return old + alpha_w * (solution - old)


def _fit(model: AcModel, critic: LinearCritic, batch_x: np.ndarray, batch_u: np.ndarray, batch_y: np.ndarray, targets: np.ndarray) -> np.ndarray:
    phi = critic.design(batch_x, batch_u, batch_y)
    return model.solver(phi, targets - critic.known(batch_x, batch_u, batch_y))


def _empty(batch: Minibatch, what: str) -> bool:
    if len(batch) == 0:
        log.warning("empty minibatch for %s; update skipped", what)
        return True
    return False


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def update_r(
    model: AcModel, w: CriticWeights, alpha_w: float, actor: ParametricPolicy, t: int, tau: int, m: int, batch: Minibatch
) -> np.ndarray:
    """New ``w_r[(t, tau, m)]`` fitted on experiences of epoch ``t`` seen by self ``tau``."""
    model.record("r", t, tau, m)
    old = w.r[(t, tau, m)]
    if _empty(batch, f"r[{t},{tau},{m}]"):
        return old
    assert model.r_critic is not None
    if m == t:
        R = model.problem.rewards.reward
        xi = _vec(lambda tt, y, x, u: R(int(tt), t, y, x, u), batch.tau.astype(float), batch.y, batch.x, batch.u)
    else:
        un = actor_actions(actor, t + 1, batch.x_next)
        xi = model.r_critic.value(w.r[(t + 1, tau, m)], batch.x_next, un, batch.y)
    return _relax(old, _fit(model, model.r_critic, batch.x, batch.u, batch.y, xi), alpha_w)


def update_f(
    model: AcModel, w: CriticWeights, alpha_w: float, actor: ParametricPolicy, t: int, tau: int, batch: Minibatch
) -> np.ndarray:
    """New ``w_f[(t, tau)]``."""
    model.record("f", t, tau)
    old = w.f[(t, tau)]
    if _empty(batch, f"f[{t},{tau}]"):
        return old
    assert model.f_critic is not None
    if t == model.problem.horizon - 1:
        F = model.problem.rewards.terminal
        xi = _vec(lambda tt, y, xn: F(int(tt), y, xn), batch.tau.astype(float), batch.y, batch.x_next)
    else:
        un = actor_actions(actor, t + 1, batch.x_next)
        xi = model.f_critic.value(w.f[(t + 1, tau)], batch.x_next, un, batch.y)
    return _relax(old, _fit(model, model.f_critic, batch.x, batch.u, batch.y, xi), alpha_w)


def update_g(
    model: AcModel, w: CriticWeights, alpha_w: float, actor: ParametricPolicy, t: int, batch: Minibatch
) -> np.ndarray:
    """New ``w_g[t]``; the target is the next state at ``T-1`` and ``g_{t+1}`` before."""
    model.record("g", t)
    old = w.g[t]
    if _empty(batch, f"g[{t}]"):
        return old
    if t == model.problem.horizon - 1:
        xi = batch.x_next.astype(float)
    else:
        un = actor_actions(actor, t + 1, batch.x_next)
        xi = model.g_critic.value(w.g[t + 1], batch.x_next, un)
    return _relax(old, _fit(model, model.g_critic, batch.x, batch.u, batch.x, xi), alpha_w)


def q_targets(model: AcModel, w: CriticWeights, actor: ParametricPolicy, t: int, batch: Minibatch) -> np.ndarray:
    """Single-sample action-value targets for own-time experiences at ``t``."""
    prob = model.problem
    T = prob.horizon
    R, F, G = prob.rewards.reward, prob.rewards.terminal, prob.rewards.mean_term
    x, u, xn = batch.x, batch.u, batch.x_next
    tt = np.full(x.size, float(t))
    g_here = model.g_critic.value(w.g[t], x, u)
    mean_here = _vec(lambda s, y, z: G(int(s), y, z), tt, x, g_here)
    skip = model.skips_adjustments
    if skip:
        own_r = _vec(lambda s, xx, uu: R(int(s), int(s), xx, xx, uu), tt, x, u)
    else:
        assert model.r_critic is not None
        own_r = model.r_critic.value(w.r[(t, t, t)], x, u, x)
    if t == T - 1:
        if skip:
            own_f = _vec(lambda s, xx, xxn: F(int(s), xx, xxn), tt, x, xn)
        else:
            assert model.f_critic is not None
            own_f = model.f_critic.value(w.f[(t, t)], x, u, x)
        return own_r + own_f + mean_here

    un = actor_actions(actor, t + 1, xn)
    cont = model.q_critic.value(w.Q[t + 1], xn, un)
    g_next = model.g_critic.value(w.g[t + 1], xn, un)
    mean_next = _vec(lambda s, y, z: G(int(s), y, z), tt + 1, xn, g_next)
    xi = own_r + cont - (mean_next - mean_here)
    if not skip:
        assert model.r_critic is not None and model.f_critic is not None
        for m in range(t + 1, T):
            xi -= model.r_critic.value(w.r[(t + 1, t + 1, m)], xn, un, xn) - model.r_critic.value(w.r[(t, t, m)], x, u, x)
        xi -= model.f_critic.value(w.f[(t + 1, t + 1)], xn, un, xn) - model.f_critic.value(w.f[(t, t)], x, u, x)
    return xi


def update_q(
    model: AcModel, w: CriticWeights, alpha_w: float, actor: ParametricPolicy, t: int, batch: Minibatch
) -> np.ndarray:
    """New ``w_Q[t]``; reads ``w_g[t]`` (and ``w_r``, ``w_f`` at ``t``) already updated."""
    model.record("Q", t)
    old = w.Q[t]
    if _empty(batch, f"Q[{t}]"):
        return old
    xi = q_targets(model, w, actor, t, batch)
    return _relax(old, _fit(model, model.q_critic, batch.x, batch.u, batch.x, xi), alpha_w)


def actor_step(
    model: AcModel, w: CriticWeights, actor: ParametricPolicy, t: int, states: np.ndarray, alpha_theta: float
) -> ParametricPolicy:
    """Ascent on ``Q_t(x, pi_t(x; theta))``, averaging the chain-rule gradient over ``states``."""
    model.record("actor", t)
    if actor.grad_theta is None:
        raise ValueError("actor has no parameter gradient")
    states = np.asarray(states, dtype=float)
    if states.size == 0:
        return actor
    u = actor_actions(actor, t, states)
    dq = model.q_critic.grad_u(w.Q[t], states, u)
    grads = np.array([np.asarray(actor.grad_theta(t, float(s), actor.theta[t]), dtype=float) for s in states])
    step = (grads * dq[:, None]).mean(axis=0)
    return actor.with_theta(t, actor.theta[t] + alpha_theta * step)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcHyper:
    """``alpha_w`` is a constant or a schedule ``l -> rate``."""

    iterations: int
    batch_trajectories: int
    alpha_theta: float
    alpha_w: float | Callable[[int], float] = 1.0
    kappa: float = 1.0
    exploration: Exploration | None = None
    x0: float | Callable[[np.random.Generator], float] = 0.0

    def rate(self, l: int) -> float:
        return float(self.alpha_w(l)) if callable(self.alpha_w) else float(self.alpha_w)


@dataclass
class AcLog:
    rows_critic: list[tuple] = field(default_factory=list)
    rows_actor: list[tuple] = field(default_factory=list)


@dataclass
class AcResult:
    actor: ParametricPolicy
    weights: CriticWeights
    log: AcLog
    buffer: ReplayBuffer


def ac_run(
    model: AcModel, weights: CriticWeights, actor: ParametricPolicy, hyper: AcHyper, seed: int = 0
) -> AcResult:
    """Run ``hyper.iterations`` collect-fit-improve iterations."""
    prob = model.problem
    T = prob.horizon
    env, explore_rng, replay = rng_stream(seed, "env"), rng_stream(seed, "exploration"), rng_stream(seed, "replay")
    w = weights.copy()
    buffer = ReplayBuffer()
    logs = AcLog()
    for l in range(hyper.iterations):
        buffer.begin_batch()
        for _ in range(hyper.batch_trajectories):
            x0 = hyper.x0(env) if callable(hyper.x0) else hyper.x0
            traj = rollout(prob, actor, x0, explore_rng if hyper.exploration is not None else env, hyper.exploration)
            for t in range(T):
                for tau in range(t + 1):
                    buffer.add(Experience(t, tau, traj.states[t], traj.actions[t], traj.states[tau], traj.states[t + 1]))
        alpha_w = hyper.rate(l)
        for t in reversed(range(T)):
            if not model.skips_adjustments:
                for tau in range(t + 1):
                    batch = replay_sample(buffer, replay, t=t, tau=tau, kappa=hyper.kappa)
                    for m in range(t, T):
                        w.r[(t, tau, m)] = update_r(model, w, alpha_w, actor, t, tau, m, batch)
                    w.f[(t, tau)] = update_f(model, w, alpha_w, actor, t, tau, batch)
            own = replay_sample(buffer, replay, t=t, tau=t, kappa=hyper.kappa)
            w.g[t] = update_g(model, w, alpha_w, actor, t, own)
            w.Q[t] = update_q(model, w, alpha_w, actor, t, own)
            actor = actor_step(model, w, actor, t, own.x, hyper.alpha_theta)
        for t in range(T):
            logs.rows_critic.append((l, t, *w.Q[t].tolist(), *w.g[t].tolist()))
            logs.rows_actor.append((l, t, *actor.theta[t].tolist()))
    return AcResult(actor, w, logs, buffer)
