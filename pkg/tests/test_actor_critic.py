import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sperl.actor_critic import (
    AcHyper,
    AcModel,
    CriticWeights,
    Experience,
    LinearCritic,
    Minibatch,
    ReplayBuffer,
    ac_run,
    actor_step,
    ols_solver,
    q_targets,
    replay_sample,
    update_g,
    update_q,
)
from sperl.core import LambdaUniform, ParametricPolicy, RealSpace, SamplerKernel, TicProblem, TicRewards
from sperl.mv import (
    MarketParams,
    MvCriticWeights,
    boundary_critic_fit,
    g_critic,
    market_problem,
    mv_actor,
    q_critic,
    transform_to_unit_state,
)


def constant_actor(T, value=0.0):
    return ParametricPolicy(T, tuple(np.array([value]) for _ in range(T)),
                            rule=lambda t, x, th: th[0] + 0.0 * np.asarray(x, dtype=float),
                            grad_theta=lambda t, x, th: np.ones(1))


def mv_model(params=MarketParams(horizon=3)):
    return AcModel(market_problem(params), q_critic(), g_critic())


def random_batch(rng, n, t, x_next=None):
    x = rng.uniform(0.5, 1.5, n)
    u = rng.uniform(-2, 2, n)
    xn = rng.normal(1.0, 0.2, n) if x_next is None else x_next(x, u)
    tt = np.full(n, t)
    return Minibatch(t=tt, tau=tt, x=x, u=u, y=x, x_next=xn)


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def filled_buffer(n_past, n_current):
    buf = ReplayBuffer()
    for i in range(n_past):
        buf.add(Experience(0, 0, float(i), 0.0, float(i), 0.0))
    buf.begin_batch()
    for i in range(n_current):
        buf.add(Experience(0, 0, 1000.0 + i, 0.0, 0.0, 0.0))
    return buf


def test_replay_kappa_zero_is_current_only():
    mb = replay_sample(filled_buffer(20, 5), np.random.default_rng(0), kappa=0.0)
    assert sorted(mb.x.tolist()) == [1000.0 + i for i in range(5)]


def test_replay_small_past_is_taken_whole():
    mb = replay_sample(filled_buffer(3, 5), np.random.default_rng(0), kappa=1.0)
    assert len(mb) == 8
    assert set(mb.x.tolist()) >= {0.0, 1.0, 2.0}


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 30), extra=st.integers(0, 30), seed=st.integers(0, 1000))
def test_replay_doubles_current_batch_without_replacement(n, extra, seed):
    buf = filled_buffer(n + extra, n)
    mb = replay_sample(buf, np.random.default_rng(seed), kappa=1.0)
    assert len(mb) == 2 * n
    assert len(set(mb.x.tolist())) == 2 * n
    assert {1000.0 + i for i in range(n)} <= set(mb.x.tolist())
    again = replay_sample(buf, np.random.default_rng(seed), kappa=1.0)
    assert np.array_equal(mb.x, again.x)


def test_replay_filters_by_time_and_self():
    buf = ReplayBuffer()
    for t in range(3):
        for tau in range(t + 1):
            buf.add(Experience(t, tau, float(10 * t + tau), 0.0, 0.0, 0.0))
    mb = replay_sample(buf, np.random.default_rng(0), t=2, tau=1)
    assert mb.x.tolist() == [21.0]
    with pytest.raises(ValueError):
        buf.add(Experience(0, 1, 0.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        replay_sample(ReplayBuffer(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Critic updates
# ---------------------------------------------------------------------------


def test_noiseless_boundary_g_recovered():
    model = mv_model()
    w = CriticWeights.zeros(model)
    batch = random_batch(np.random.default_rng(1), 50, 2, lambda x, u: 0.3 + 1.1 * x + 0.7 * u)
    new = update_g(model, w, 1.0, constant_actor(3), 2, batch)
    assert np.allclose(new, [0.3, 1.1, 0.7], atol=1e-8)


def test_q_update_is_least_squares_projection():
    model = mv_model()
    rng = np.random.default_rng(2)
    w = CriticWeights.zeros(model)
    w.g[2] = np.array([0.0, 1.0, 0.01])
    batch = random_batch(rng, 80, 2)
    new = update_q(model, w, 1.0, constant_actor(3), 2, batch)
    w.Q[2] = new
    phi = model.q_critic.design(batch.x, batch.u)
    resid = q_targets(model, w, constant_actor(3), 2, batch) - phi @ new
    assert np.all(np.abs(phi.T @ resid) < 1e-8 * np.linalg.norm(phi, axis=0))


def test_boundary_q_target_uses_squared_mean():
    params = MarketParams(horizon=3, gamma=1.4)
    model = mv_model(params)
    w = CriticWeights.zeros(model)
    w.g[2] = np.array([0.1, 0.9, 0.02])
    batch = random_batch(np.random.default_rng(3), 10, 2)
    g_hat = 0.1 + 0.9 * batch.x + 0.02 * batch.u
    xn = batch.x_next
    expect = xn - 0.7 * xn**2 + 0.7 * g_hat**2
    assert np.allclose(q_targets(model, w, constant_actor(3), 2, batch), expect, atol=1e-14)


def test_relaxation_rate_and_unit_rate_identity():
    model = mv_model()
    batch = random_batch(np.random.default_rng(4), 40, 2)
    w = CriticWeights.zeros(model)
    w.g[2] = np.array([1.0, -1.0, 2.0])
    star = ols_solver(model.g_critic.design(batch.x, batch.u), batch.x_next)
    assert np.allclose(update_g(model, w, 1.0, constant_actor(3), 2, batch), star, atol=1e-14)
    errs = []
    for _ in range(15):
        w.g[2] = update_g(model, w, 0.25, constant_actor(3), 2, batch)
        errs.append(np.linalg.norm(w.g[2] - star))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.allclose(ratios, 0.75, atol=1e-6)


def test_empty_minibatch_skips_with_warning(caplog):
    model = mv_model()
    w = CriticWeights.zeros(model)
    w.g[1] = np.array([1.0, 2.0, 3.0])
    empty = Minibatch(*(np.zeros(0) for _ in range(6)))
    with caplog.at_level(logging.WARNING):
        out = update_g(model, w, 1.0, constant_actor(3), 1, empty)
    assert np.array_equal(out, w.g[1])
    assert "empty minibatch" in caplog.text


def test_actor_step_vertex_and_direction():
    model = mv_model()
    w = CriticWeights.zeros(model)
    w.Q[1] = np.array([0.0, 1.0, 0.0018, -0.00054])
    vertex = 0.0018 / (2 * 0.00054)
    states = np.linspace(0.5, 1.5, 7)
    at_vertex = actor_step(model, w, constant_actor(3, vertex), 1, states, 2.0)
    assert abs(at_vertex.theta[1][0] - vertex) < 1e-12
    start = constant_actor(3, 0.2)
    moved = actor_step(model, w, start, 1, states, 2.0)
    assert abs(moved.theta[1][0] - vertex) < abs(0.2 - vertex)
    assert moved.theta[0][0] == 0.2 and moved.theta[2][0] == 0.2


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def anchored_problem(T=3):
    """Sampler problem whose rewards depend on the evaluating self: stay near ``y``."""

    def sample(t, x, u, rng):
        return float(x + u + rng.normal(0.0, 0.1))

    rewards = TicRewards(
        reward=lambda tau, t, y, x, u: -((u - 0.1 * y) ** 2) / (1.0 + tau),
        terminal=lambda tau, y, x: -((x - y) ** 2),
        mean_term=lambda tau, y, z: 0.0 * np.asarray(z, dtype=float),
    )
    return TicProblem(T, (RealSpace(),) * (T + 1), (RealSpace(),) * T, SamplerKernel(sample), rewards)


def anchored_model(log=None):
    quad = LinearCritic(5, features=lambda x, u, y: np.column_stack([np.ones_like(x), x, u, y, u * u]))
    q = LinearCritic(
        4,
        features=lambda x, u, y: np.column_stack([np.ones_like(x), x, u, u * u]),
        feature_grad_u=lambda x, u, y: np.column_stack([np.zeros_like(x), np.zeros_like(x), np.ones_like(u), 2 * u]),
    )
    g = LinearCritic(3, features=lambda x, u, y: np.column_stack([np.ones_like(x), x, u]))
    return AcModel(anchored_problem(), q, g, r_critic=quad, f_critic=quad, call_log=log)


def anchored_hyper(L):
    return AcHyper(iterations=L, batch_trajectories=8, alpha_theta=0.1, alpha_w=0.5,
                   exploration=LambdaUniform(0.5), x0=lambda rng: float(rng.normal()))


def test_zero_iterations_leave_everything_unchanged():
    model = anchored_model()
    w = CriticWeights.zeros(model)
    w.Q[0][:] = 3.0
    actor = constant_actor(3, 0.7)
    res = ac_run(model, w, actor, anchored_hyper(0))
    assert all(np.array_equal(a, b) for a, b in zip(res.weights.Q, w.Q))
    assert res.actor.theta == actor.theta and len(res.buffer) == 0


def test_updates_run_backward_in_time():
    calls = []
    model = anchored_model(calls)
    res = ac_run(model, CriticWeights.zeros(model), constant_actor(3), anchored_hyper(2), seed=5)
    T = 3
    per_iter = len(calls) // 2
    for it in range(2):
        block = calls[it * per_iter:(it + 1) * per_iter]
        times = [c[1] for c in block]
        assert times == sorted(times, reverse=True)
        for t in range(T):
            kinds = [c[0] for c in block if c[1] == t]
            assert kinds[-3:] == ["g", "Q", "actor"]
            assert set(kinds[:-3]) == {"r", "f"}
            assert kinds.count("r") == (t + 1) * (T - t) and kinds.count("f") == t + 1
    assert np.all(np.isfinite(np.concatenate(res.weights.Q)))


def test_buffer_is_append_only_and_complete():
    model = anchored_model()
    hyper = anchored_hyper(3)
    res = ac_run(model, CriticWeights.zeros(model), constant_actor(3), hyper, seed=2)
    assert len(res.buffer) == 3 * hyper.batch_trajectories * (1 + 2 + 3)
    short = ac_run(model, CriticWeights.zeros(model), constant_actor(3), anchored_hyper(1), seed=2)
    first = [short.buffer.experience(i) for i in range(len(short.buffer))]
    assert [res.buffer.experience(i) for i in range(len(first))] == first


def test_run_is_deterministic():
    model = anchored_model()
    a = ac_run(model, CriticWeights.zeros(model), constant_actor(3), anchored_hyper(2), seed=9)
    b = ac_run(model, CriticWeights.zeros(model), constant_actor(3), anchored_hyper(2), seed=9)
    assert a.log.rows_critic == b.log.rows_critic and a.log.rows_actor == b.log.rows_actor


def test_missing_adjustment_critics_rejected():
    model = anchored_model()
    bare = AcModel(model.problem, model.q_critic, model.g_critic)
    with pytest.raises(ValueError):
        CriticWeights.zeros(bare)


# ---------------------------------------------------------------------------
# Agreement with the specialised mean-variance boundary fit
# ---------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_generic_updates_match_mean_variance_boundary_fit(seed):
    params = MarketParams(horizon=4)
    rng = np.random.default_rng(seed)
    n = 200
    x = rng.uniform(0.8, 1.6, n)
    u = rng.uniform(-1.5, 3.0, n)
    xn = (1 + params.r) * x + u * (rng.normal(params.mu * params.dt, params.sigma * np.sqrt(params.dt), n) - params.r)
    ones, u1, x1 = transform_to_unit_state(params.r, x, u, xn)
    growth = 1.0 + params.r
    pinned_g = LinearCritic(1, features=lambda x, u, y: u[:, None], offset=lambda x, u, y: growth * x)
    pinned_q = LinearCritic(
        2,
        features=lambda x, u, y: np.column_stack([u * u, u]),
        feature_grad_u=lambda x, u, y: np.column_stack([2 * u, np.ones_like(u)]),
        offset=lambda x, u, y: growth * x,
    )
    model = AcModel(market_problem(params), pinned_q, pinned_g)
    w = CriticWeights.zeros(model)
    k = params.horizon - 1
    tt = np.full(n, k)
    batch = Minibatch(t=tt, tau=tt, x=ones, u=u1, y=ones, x_next=x1)
    actor = mv_actor(np.zeros(params.horizon))
    w.g[k] = update_g(model, w, 1.0, actor, k, batch)
    w.Q[k] = update_q(model, w, 1.0, actor, k, batch)

    fit = boundary_critic_fit(u1, x1, MvCriticWeights.zeros(params.horizon), 0, params, use_als=False)
    assert w.g[k][0] == pytest.approx(fit.weights.g[k, 2], rel=1e-9, abs=1e-13)
    assert w.Q[k][0] == pytest.approx(fit.weights.q[k, 3], rel=1e-9, abs=1e-13)
    assert w.Q[k][1] == pytest.approx(fit.weights.q[k, 2], rel=1e-9, abs=1e-13)
