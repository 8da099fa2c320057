"""Dynamic mean-variance portfolio selection with equilibrium actor-critic.

Wealth evolves as ``X' = (1 + r) X + u (Y - r)`` with one risky asset whose
per-period return is ``Y ~ Normal(mu dt, sigma^2 dt)`` and risk-free rate
``r = r_ann dt``. The criterion of the self at time ``t`` is
``E[X_T] - (gamma / 2) Var[X_T]``, i.e. terminal reward
``F(x) = x - (gamma/2) x^2`` plus mean term ``G(z) = (gamma/2) z^2``.

Critics are exact for this model up to their weights:

* ``Q_t(x, u) = w3 u^2 + w2 u + w1 x + w0``  (weights stored as ``[w0, w1, w2, w3]``)
* ``g_t(x, u) = w2 u + w1 x + w0``            (weights stored as ``[w0, w1, w2]``)

Only the boundary ``t = T-1`` is fitted from data. Every experience is first
moved to the slice ``x = 1`` (the dynamics are linear in ``x``), the
coefficients known in closed form (``w0 = 0``, ``w1 = 1 + r``) are pinned and
the remaining ones are fitted with adaptive least squares and smoothed with an
EMA. Earlier critics follow from the boundary by an exact parametric
recursion, and the state-invariant actor ``u = theta(t)`` climbs ``Q_t``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .actor_critic import AcModel, CriticWeights, LinearCritic, Minibatch, update_g, update_q
from .core import ParametricPolicy, RealSpace, SamplerKernel, TicProblem, TicRewards, rng_stream
from .linreg import FitError, RegressionProblem, als_fit, ema_rate, ols_fit

log = logging.getLogger(__name__)

EVAL_WINDOW = 50


@dataclass(frozen=True)
class MarketParams:
    """Annualized market inputs; ``dt`` is years per period."""

    mu: float = 0.20
    sigma: float = 0.30
    r_ann: float = 0.02
    dt: float = 0.01
    horizon: int = 100
    gamma: float = 1.2
    x0: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def r(self) -> float:
        """Per-period risk-free rate."""
        return self.r_ann * self.dt

    @property
    def excess(self) -> float:
        """Expected per-period excess return ``mu dt - r``."""
        return self.mu * self.dt - self.r

    @property
    def variance(self) -> float:
        """Per-period return variance ``sigma^2 dt``."""
        return self.sigma**2 * self.dt


@dataclass(frozen=True)
class MvHyper:
    iterations: int = 5000
    batch: int = 5
    radius: float = 1.5
    kappa: float = 1.0
    alpha_theta: float = 2.0
    use_als: bool = True
    model_free: bool = False


PRESETS: dict[str, tuple[dict, dict]] = {
    "paper": (dict(sigma=0.30, r_ann=0.02, dt=0.01, horizon=100, gamma=1.2), dict(iterations=5000)),
    "desk": (dict(sigma=0.30, r_ann=0.02, dt=0.05, horizon=20, gamma=1.2), dict(iterations=500)),
}


def preset(name: str, mu: float = 0.20) -> tuple[MarketParams, MvHyper]:
    try:
        market, hyper = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return MarketParams(mu=mu, **market), MvHyper(**hyper)


# ---------------------------------------------------------------------------
# Market
# ---------------------------------------------------------------------------


def market_step(params: MarketParams, x: np.ndarray | float, u: np.ndarray | float, rng: np.random.Generator) -> np.ndarray:
    """Next wealth for wealth ``x`` and risky allocation ``u`` (vectorized)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape, u.shape)
    y = rng.normal(params.mu * params.dt, params.sigma * np.sqrt(params.dt), size=shape)
    return (1.0 + params.r) * x + u * (y - params.r)


def transform_to_unit_state(r: float, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Move experiences to the ``x = 1`` slice: ``x_next - (1 + r)(x - 1)``."""
    x = np.asarray(x, dtype=float)
    return np.ones_like(x), np.asarray(u, dtype=float), np.asarray(x_next, dtype=float) - (1.0 + r) * (x - 1.0)


def market_problem(params: MarketParams) -> TicProblem:
    """The market as a sampler-form problem for the generic actor-critic."""

    def sample(t: int, x: float, u: float, rng: np.random.Generator) -> float:
        return float(market_step(params, x, u, rng))

    half = 0.5 * params.gamma
    rewards = TicRewards(
        reward=lambda tau, t, y, x, u: 0.0 * np.asarray(x, dtype=float),
        terminal=lambda tau, y, x: x - half * np.asarray(x, dtype=float) ** 2,
        mean_term=lambda tau, y, z: half * np.asarray(z, dtype=float) ** 2,
        tau_free=True,
    )
    T = params.horizon
    return TicProblem(T, (RealSpace(),) * (T + 1), (RealSpace(),) * T, SamplerKernel(sample, stationary=True), rewards)


def q_critic() -> LinearCritic:
    """``Q = w0 + w1 x + w2 u + w3 u^2``."""
    return LinearCritic(
        dim=4,
        features=lambda x, u, y: np.column_stack([np.ones_like(x), x, u, u * u]),
        feature_grad_u=lambda x, u, y: np.column_stack([np.zeros_like(x), np.zeros_like(x), np.ones_like(u), 2 * u]),
    )


def g_critic() -> LinearCritic:
    """``g = w0 + w1 x + w2 u``."""
    return LinearCritic(dim=3, features=lambda x, u, y: np.column_stack([np.ones_like(x), x, u]))


def mv_actor(theta: np.ndarray) -> ParametricPolicy:
    return ParametricPolicy(
        len(theta),
        tuple(np.atleast_1d(th) for th in theta),
        rule=lambda t, x, th: th[0] + 0.0 * np.asarray(x, dtype=float),
        grad_theta=lambda t, x, th: np.ones(1),
    )


# ---------------------------------------------------------------------------
# Critic weights
# ---------------------------------------------------------------------------


@dataclass
class MvCriticWeights:
    """``q[t] = [w0, w1, w2, w3]`` and ``g[t] = [w0, w1, w2]`` per time."""

    q: np.ndarray
    g: np.ndarray

    @classmethod
    def zeros(cls, horizon: int) -> "MvCriticWeights":
        return cls(np.zeros((horizon, 4)), np.zeros((horizon, 3)))

    def copy(self) -> "MvCriticWeights":
        return MvCriticWeights(self.q.copy(), self.g.copy())

    def q_value(self, t: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        w0, w1, w2, w3 = self.q[t]
        return w3 * u * u + w2 * u + w1 * x + w0

    def g_value(self, t: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        w0, w1, w2 = self.g[t]
        return w2 * u + w1 * x + w0


@dataclass(frozen=True)
class BoundaryFit:
    weights: MvCriticWeights
    failed: bool
    dropped: int
    gap: float


def boundary_critic_fit(
    u: np.ndarray,
    x1_next: np.ndarray,
    weights: MvCriticWeights,
    l: int,
    params: MarketParams,
    use_als: bool = True,
) -> BoundaryFit:
    """Fit ``g_{T-1}`` then ``Q_{T-1}`` on unit-slice experiences ``(1, u, x1_next)``.

    Only ``w2`` of ``g`` and ``w2, w3`` of ``Q`` are trained; ``w0 = 0`` and
    ``w1 = 1 + r`` are pinned. The fit is blended into the old weights with
    the EMA rate of iteration ``l``. If the regression fails, the old trained
    coefficients are kept. ``gap`` is ``w2(Q) - w2(g)``, two estimates of the
    same excess return.
    """
    T = params.horizon
    k = T - 1
    growth = 1.0 + params.r
    half = 0.5 * params.gamma
    u = np.asarray(u, dtype=float)
    x1 = np.asarray(x1_next, dtype=float)
    out = weights.copy()
    out.g[k, 0], out.g[k, 1] = 0.0, growth
    out.q[k, 0], out.q[k, 1] = 0.0, growth
    rate = ema_rate(l)
    failed, dropped = False, 0

    def solve(targets: np.ndarray, feats: np.ndarray, resid: np.ndarray) -> np.ndarray:
        nonlocal dropped
        prob = RegressionProblem(targets, feats)
        if not use_als:
            return ols_fit(prob).weights
        fit, diag = als_fit(prob, resid)
        dropped += diag.dropped
        return fit.weights

    try:
        w2g = solve(x1 - growth, u[:, None], (u * u)[:, None])[0]
        out.g[k, 2] += rate * (w2g - out.g[k, 2])
    except FitError as exc:
        log.warning("boundary g fit failed at iteration %d: %s", l, exc)
        failed = True

    g_hat = out.g[k, 2] * u + growth
    xi_q = x1 - half * x1 * x1 + half * g_hat * g_hat
    try:
        w3q, w2q = solve(xi_q - growth, np.column_stack([u * u, u]), np.column_stack([u * u, u**4]))
        out.q[k, 3] += rate * (w3q - out.q[k, 3])
        out.q[k, 2] += rate * (w2q - out.q[k, 2])
    except FitError as exc:
        log.warning("boundary Q fit failed at iteration %d: %s", l, exc)
        failed = True
    return BoundaryFit(out, failed, dropped, float(out.q[k, 2] - out.g[k, 2]))


def parametric_recursion(
    q_next: np.ndarray, g_next: np.ndarray, q_last: np.ndarray, g_last: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Critic weights at ``t`` from those at ``t + 1`` and at ``T - 1``.

    The constant terms ``w0`` are not propagated (left at zero): they do not
    enter the action gradient.
    """
    a1q, a1g = q_next[1], g_next[1]
    q = np.array(
        [
            0.0,
            (a1q - a1g**2) * g_last[1] + a1g**2 * q_last[1],
            a1q * g_last[2] + a1g**2 * (q_last[2] - g_last[2]),
            a1g**2 * q_last[3],
        ]
    )
    g = np.array([0.0, a1g * g_last[1], a1g * g_last[2]])
    return q, g


def propagate(weights: MvCriticWeights) -> MvCriticWeights:
    """Fill ``t < T-1`` from the boundary weights by the parametric recursion."""
    out = weights.copy()
    k = out.q.shape[0] - 1
    for t in range(k - 1, -1, -1):
        out.q[t], out.g[t] = parametric_recursion(out.q[t + 1], out.g[t + 1], out.q[k], out.g[k])
    return out


def actor_step(w3: float, w2: float, theta: float, alpha_theta: float) -> float:
    """``theta + alpha (2 w3 theta + w2)``: ascent on ``u -> Q_t(1, u)``."""
    return theta + alpha_theta * (2.0 * w3 * theta + w2)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    weights: MvCriticWeights
    u_star: np.ndarray
    u_star_squared_excess: np.ndarray


def boundary_truth(params: MarketParams) -> MvCriticWeights:
    T = params.horizon
    w = MvCriticWeights.zeros(T)
    growth = 1.0 + params.r
    w.g[T - 1] = [0.0, growth, params.excess]
    w.q[T - 1] = [0.0, growth, params.excess, -0.5 * params.gamma * params.variance]
    return w


def ground_truth(params: MarketParams) -> GroundTruth:
    """True critic weights, the equilibrium allocation, and an alternative closed form.

    ``u_star[t] = -w2(t; Q) / (2 w3(t; Q))`` under the recursion-propagated
    true weights. ``u_star_squared_excess`` is
    ``(mu dt - r)^2 / (gamma sigma^2 dt) * (1 + r)^(T - t - 1)``, kept only
    for comparison.
    """
    w = propagate(boundary_truth(params))
    u_star = -w.q[:, 2] / (2.0 * w.q[:, 3])
    t = np.arange(params.horizon)
    squared = params.excess**2 / (params.gamma * params.variance) * (1.0 + params.r) ** (params.horizon - t - 1)
    return GroundTruth(w, u_star, squared)


# ---------------------------------------------------------------------------
# Simulation and evaluation
# ---------------------------------------------------------------------------


def simulate(
    params: MarketParams,
    theta: np.ndarray,
    n: int,
    market: np.random.Generator,
    explore: np.random.Generator | None = None,
    radius: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` trajectories from ``x0``; returns ``(x, u, x_next)`` of shape ``(T, n)``."""
    T = params.horizon
    xs, us, xn = np.empty((T, n)), np.empty((T, n)), np.empty((T, n))
    x = np.full(n, params.x0, dtype=float)
    for t in range(T):
        u = np.full(n, float(theta[t]))
        if explore is not None and radius > 0:
            u = u + explore.uniform(-radius, radius, size=n)
        nxt = market_step(params, x, u, market)
        xs[t], us[t], xn[t] = x, u, nxt
        x = nxt
    return xs, us, xn


def evaluate_policy(params: MarketParams, theta: np.ndarray, n_episodes: int = EVAL_WINDOW, seed: int = 0) -> tuple[float, float]:
    """Sample mean and sample stdev of terminal wealth without exploration."""
    _, _, xn = simulate(params, theta, n_episodes, rng_stream(seed, "eval"))
    final = xn[-1]
    std = float(final.std(ddof=1)) if n_episodes > 1 else 0.0
    return float(final.mean()), std


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class MvResult:
    params: MarketParams
    hyper: MvHyper
    theta: np.ndarray
    weights: MvCriticWeights
    truth: GroundTruth
    tracked: tuple[int, ...]
    wealth: np.ndarray
    critic_log: np.ndarray
    actor_log: np.ndarray
    failures: int = 0
    gap_log: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def windows(self, size: int = EVAL_WINDOW) -> np.ndarray:
        """Rows ``(window, mean X_T, stdev X_T)`` over non-overlapping windows."""
        n = self.wealth.size // size
        w = self.wealth[: n * size].reshape(n, size)
        return np.column_stack([np.arange(n), w.mean(axis=1), w.std(axis=1, ddof=1)])


def tracked_times(horizon: int) -> tuple[int, ...]:
    return tuple(sorted({0, (horizon - 1) // 2, horizon - 1}))


def _model_free_fill(
    params: MarketParams,
    weights: MvCriticWeights,
    theta: np.ndarray,
    buf: dict[str, np.ndarray],
    l: int,
    replay: np.random.Generator,
    kappa: float,
) -> MvCriticWeights:
    """Regress ``g_t``, ``Q_t`` for ``t < T-1`` with the generic updates instead of the recursion."""
    T = params.horizon
    model = AcModel(market_problem(params), q_critic(), g_critic())
    cw = CriticWeights(Q=[w.copy() for w in weights.q], g=[w.copy() for w in weights.g])
    actor = mv_actor(theta)
    rate = ema_rate(l)
    for t in range(T - 2, -1, -1):
        cur = np.arange(buf["x"].shape[2])
        past_n = l * cur.size
        k = min(int(kappa * cur.size), past_n)
        pick = replay.choice(past_n, size=k, replace=False) if k > 0 else np.zeros(0, dtype=int)
        xs = np.concatenate([buf["x"][l, t], buf["x"][:l, t].reshape(-1)[pick]])
        us = np.concatenate([buf["u"][l, t], buf["u"][:l, t].reshape(-1)[pick]])
        xn = np.concatenate([buf["xn"][l, t], buf["xn"][:l, t].reshape(-1)[pick]])
        tt = np.full(xs.size, t)
        batch = Minibatch(t=tt, tau=tt, x=xs, u=us, y=xs, x_next=xn)
        try:
            cw.g[t] = update_g(model, cw, rate, actor, t, batch)
            cw.Q[t] = update_q(model, cw, rate, actor, t, batch)
        except FitError as exc:
            log.warning("model-free fit failed at t=%d, iteration %d: %s", t, l, exc)
    return MvCriticWeights(np.array(cw.Q), np.array(cw.g))


def mv_train(params: MarketParams, hyper: MvHyper, seed: int = 0, theta0: np.ndarray | None = None) -> MvResult:
    """Full training loop; one greedy evaluation episode per iteration.

    Each iteration: ``batch`` explored trajectories from ``x0`` enter the
    buffer; the minibatch is every current transition plus
    ``kappa * |current|`` past transitions (pooled over all periods, drawn
    without replacement); the boundary critic is refitted, earlier critics
    follow from the recursion, and the actor takes one step at each time,
    from ``T-1`` down to ``0``.
    """
    T, B, L = params.horizon, hyper.batch, hyper.iterations
    market = rng_stream(seed, "env")
    explore = rng_stream(seed, "exploration")
    replay = rng_stream(seed, "replay")
    evaluation = rng_stream(seed, "eval")
    truth = ground_truth(params)
    track = tracked_times(T)

    theta = np.zeros(T) if theta0 is None else np.array(theta0, dtype=float)
    weights = MvCriticWeights.zeros(T)
    buf = {k: np.empty((L, T, B)) for k in ("x", "u", "xn")}
    wealth = np.empty(L)
    critic_log = np.empty((L, len(track), 3))
    actor_log = np.empty((L, len(track)))
    gaps = np.empty(L)
    failures = 0
    n_cur = T * B

    for l in range(L):
        xs, us, xn = simulate(params, theta, B, market, explore, hyper.radius)
        buf["x"][l], buf["u"][l], buf["xn"][l] = xs, us, xn
        past = l * n_cur
        k = min(int(hyper.kappa * n_cur), past)
        pick = replay.choice(past, size=k, replace=False) if k > 0 else np.zeros(0, dtype=int)
        x_b = np.concatenate([xs.reshape(-1), buf["x"][:l].reshape(-1)[pick]])
        u_b = np.concatenate([us.reshape(-1), buf["u"][:l].reshape(-1)[pick]])
        xn_b = np.concatenate([xn.reshape(-1), buf["xn"][:l].reshape(-1)[pick]])
        _, u1, x1n = transform_to_unit_state(params.r, x_b, u_b, xn_b)

        fit = boundary_critic_fit(u1, x1n, weights, l, params, hyper.use_als)
        failures += int(fit.failed)
        gaps[l] = fit.gap
        if hyper.model_free:
            weights = _model_free_fill(params, fit.weights, theta, buf, l, replay, hyper.kappa)
        else:
            weights = propagate(fit.weights)
        for t in range(T - 1, -1, -1):
            theta[t] = actor_step(weights.q[t, 3], weights.q[t, 2], theta[t], hyper.alpha_theta)

        _, _, ev = simulate(params, theta, 1, evaluation)
        wealth[l] = ev[-1, 0]
        rows = list(track)
        critic_log[l] = np.column_stack([weights.g[rows, 2], weights.q[rows, 2], weights.q[rows, 3]])
        actor_log[l] = theta[rows]

    return MvResult(params, hyper, theta, weights, truth, track, wealth, critic_log, actor_log, failures, gaps)


def config_dict(params: MarketParams, hyper: MvHyper) -> dict:
    return {"market": asdict(params), "hyper": asdict(hyper)}
