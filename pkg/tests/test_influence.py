import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from infsample.influence import (
    LissaConfig,
    LissaDivergenceError,
    MLPContext,
    QuadraticContext,
    RemovalConfig,
    class_removal_edit,
    direct_ihvp_oracle,
    influence_vector,
    lissa_ihvp,
    mean_hvp,
)
from infsample.linalg import RngStream
from infsample.model import dense_hessian, hvp
from infsample.oracles import loo_cosines, tiny_model
from infsample.samplers import SampleSet


def spd(p, seed, low=0.5, high=3.0):
    rng = RngStream(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    return Q @ np.diag(rng.uniform(low, high, size=p)) @ Q.T


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture(scope="module")
def tiny_ctx():
    spec, theta, X, y = tiny_model(1)
    return MLPContext(spec, X, y), theta


# -- mean_hvp --

def test_mean_hvp_examples(tiny_ctx):
    ctx, theta = tiny_ctx
    v = RngStream(0).normal(size=ctx.param_count)
    single = mean_hvp(ctx, theta, [5], v)
    np.testing.assert_allclose(single, hvp(ctx.spec, theta, ctx.inputs[5:6], ctx.labels[5:6], v))
    np.testing.assert_array_equal(mean_hvp(ctx, theta, [1, 2], np.zeros_like(v)), 0)
    S = np.arange(0, 120, 7)
    H = dense_hessian(ctx.spec, theta, ctx.inputs[S], ctx.labels[S])
    assert rel(mean_hvp(ctx, theta, SampleSet(S, "random"), v), H @ v) <= 1e-8
    with pytest.raises(ValueError):
        mean_hvp(ctx, theta, [], v)


# -- lissa --

def test_lissa_identity_fixed_point():
    ctx = QuadraticContext(np.eye(3), np.zeros((4, 3)))
    v = np.array([1.0, -2.0, 0.5])
    res = lissa_ihvp(ctx, np.zeros(3), [0, 1], v, LissaConfig(damping=0.0, scale=1.0))
    assert res.converged and res.iterations == 1
    np.testing.assert_array_equal(res.vector, v)


def test_lissa_scalar_geometric_series():
    ctx = QuadraticContext([[0.5]], [[0.0]])
    res = lissa_ihvp(ctx, np.zeros(1), [0], [1.0], LissaConfig(delta=1e-12, damping=0.0, scale=1.0))
    # iterates 1, 1.5, 1.75, ...: successive differences 0.5, 0.25, ...
    np.testing.assert_allclose(res.residuals[:3], [0.5, 0.25, 0.125])
    ratios = np.array(res.residuals[1:]) / np.array(res.residuals[:-1])
    np.testing.assert_allclose(ratios, 0.5)
    assert res.vector[0] == pytest.approx(2.0, abs=1e-11)


def test_lissa_max_iters_not_an_error():
    ctx = QuadraticContext([[0.01]], [[0.0]])
    res = lissa_ihvp(ctx, np.zeros(1), [0], [1.0], LissaConfig(max_iters=5, damping=0.0, scale=1.0))
    assert not res.converged and res.iterations == 5


def test_lissa_divergence():
    ctx = QuadraticContext([[-1.0]], [[0.0]])
    with pytest.raises(LissaDivergenceError, match="scale or the damping"):
        lissa_ihvp(ctx, np.zeros(1), [0], [1.0], LissaConfig(damping=0.0, scale=1.0))


def test_lissa_config_validation():
    with pytest.raises(ValueError):
        LissaConfig(delta=0)
    with pytest.raises(ValueError):
        LissaConfig(scale=-1.0)
    with pytest.raises(ValueError):
        LissaConfig(damping=-0.1)
    with pytest.raises(ValueError):
        RemovalConfig(removed_class=0, tau=0.0)


def test_lissa_matches_dense_oracle_on_trained_nets():
    for seed in range(5):
        spec, theta, X, y = tiny_model(seed)
        ctx = MLPContext(spec, X, y)
        S = np.arange(X.shape[0])
        v = RngStream(seed, 3).normal(size=spec.param_count)
        res = lissa_ihvp(ctx, theta, S, v, LissaConfig(delta=1e-6, max_iters=100_000, damping=0.05))
        assert res.converged and res.residual <= 1e-6
        assert rel(res.vector, direct_ihvp_oracle(ctx, theta, S, v, 0.05)) <= 1e-3


def test_lissa_fixed_point_residual_and_monotone_tail(tiny_ctx):
    ctx, theta = tiny_ctx
    S = np.arange(0, 120, 3)
    cfg = LissaConfig(delta=1e-6, max_iters=100_000, damping=0.05)
    for seed in range(3):
        v = RngStream(seed, 4).normal(size=ctx.param_count)
        res = lissa_ihvp(ctx, theta, S, v, cfg)
        assert res.converged and res.iterations <= cfg.max_iters
        lhs = np.linalg.norm(mean_hvp(ctx, theta, S, res.vector) + cfg.damping * res.vector - v)
        assert lhs <= (cfg.delta * res.scale + 1e-9) * (1 + np.linalg.norm(v))
        tail = np.array(res.residuals[-11:])
        assert np.all(tail[1:] <= 1.05 * tail[:-1])


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_lissa_linearity(a, b, seed):
    spec, theta, X, y = tiny_model(0)
    ctx = MLPContext(spec, X, y)
    S = np.arange(0, 120, 4)
    rng = RngStream(seed)
    u, w = rng.normal(size=(2, spec.param_count))
    cfg = LissaConfig(delta=1e-8, max_iters=100_000, damping=0.05)
    combo = lissa_ihvp(ctx, theta, S, a * u + b * w, cfg).vector
    parts = a * lissa_ihvp(ctx, theta, S, u, cfg).vector + b * lissa_ihvp(ctx, theta, S, w, cfg).vector
    scale = max(np.linalg.norm(parts), np.linalg.norm(combo), 1e-12)
    assert np.linalg.norm(combo - parts) <= 5e-3 * scale


def test_lissa_minibatch_mode_is_seeded(tiny_ctx):
    ctx, theta = tiny_ctx
    v = RngStream(5).normal(size=ctx.param_count)
    cfg = LissaConfig(delta=1e-3, max_iters=200, damping=0.3, batch_size=16)
    a = lissa_ihvp(ctx, theta, np.arange(60), v, cfg, RngStream(1)).vector
    b = lissa_ihvp(ctx, theta, np.arange(60), v, cfg, RngStream(1)).vector
    np.testing.assert_array_equal(a, b)


def test_lissa_telemetry(tiny_ctx):
    ctx, theta = tiny_ctx
    res = lissa_ihvp(ctx, theta, np.arange(10), np.ones(ctx.param_count), LissaConfig(damping=0.3))
    t = res.telemetry()
    assert set(t) == {"iterations", "converged", "residual", "wall_time_s", "peak_bytes"}
    assert t["peak_bytes"] >= 4 * ctx.param_count * 8
    assert t["wall_time_s"] > 0


def test_telemetry_work_tracks_wall_time():
    # calls x separately timed cost of one HVP at that sample size, against LiSSA's own clock
    from infsample.harness import make_blobs
    from infsample.model import Dataset, ModelSpec, TrainConfig, train

    X, y = make_blobs(4, 800, 10, 5.0, 1.0, 7)
    spec = ModelSpec((10, 32, 4), "tanh", 0.01)
    theta = train(spec, Dataset(X, y), TrainConfig(0.1, 50, 32, 0))
    ctx = MLPContext(spec, X, y)
    v = RngStream(6).normal(size=ctx.param_count)
    cfg = LissaConfig(delta=1e-6, damping=0.3)
    predicted, measured = [], []
    # sizes far enough apart that per-example work, not call overhead, sets the cost
    for m in (50, 400, 800, 1600, 3200):
        idx = np.arange(m)
        per_call = []
        for _ in range(15):
            t0 = time.perf_counter()
            ctx.hvp(theta, idx, v)
            per_call.append(time.perf_counter() - t0)
        runs = [lissa_ihvp(ctx, theta, idx, v, cfg) for _ in range(3)]
        assert runs[0].hvp_calls == runs[0].iterations + cfg.power_iters
        predicted.append(runs[0].hvp_calls * min(per_call))
        measured.append(min(r.wall_time_s for r in runs))
    assert stats.spearmanr(predicted, measured).statistic >= 0.9


# -- direct oracle --

def test_direct_oracle_examples():
    ctx = QuadraticContext(np.eye(4), np.zeros((2, 4)))
    v = np.array([1.0, 2.0, -1.0, 0.0])
    np.testing.assert_allclose(direct_ihvp_oracle(ctx, np.zeros(4), [0], v, 0.0), v)
    A = spd(4, 1)
    ctx = QuadraticContext(A, np.zeros((2, 4)))
    out = direct_ihvp_oracle(ctx, np.zeros(4), [0], v, 1e6)
    assert np.linalg.norm(out) <= np.linalg.norm(v) / 1e6


# -- influence vector --

def test_influence_identity_hessian():
    ctx = QuadraticContext(np.eye(3), RngStream(0).normal(size=(5, 3)))
    theta = np.array([0.3, -0.1, 2.0])
    z = ctx.points[2]
    iv = influence_vector(ctx, theta, [0, 1], z, None, LissaConfig(damping=0.0, scale=1.0))
    np.testing.assert_allclose(iv, -ctx.point_grad(theta, z))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_influence_sign_on_convex_quadratic(p, seed):
    A = spd(p, seed)
    ctx = QuadraticContext(A, RngStream(seed, 1).normal(size=(4, p)))
    theta = RngStream(seed, 2).normal(size=p)
    z = ctx.points[0]
    iv = influence_vector(ctx, theta, [0, 1, 2], z, None, LissaConfig(delta=1e-10, damping=0.0))
    assert iv @ ctx.point_grad(theta, z) <= 0


def test_influence_predicts_leave_one_out():
    cos = loo_cosines(0, np.arange(10))
    assert np.sum(cos >= 0.9) >= 9


# -- class removal --

def quadratic_removal_problem(seed=0, p=5, n=30, m=6):
    A = spd(p, seed)
    pts = RngStream(seed, 1).normal(size=(n, p))
    pts[:m] += 3.0  # the "removed class" sits apart
    return QuadraticContext(A, pts), np.arange(m), np.arange(m, n)


def test_removal_exact_for_quadratic_at_theoretical_tau():
    ctx, removed, kept = quadratic_removal_problem()
    n, m = ctx.n, removed.size
    theta_hat = ctx.minimizer()
    cfg = RemovalConfig(removed_class=0, tau=n / (n - m),
                        lissa=LissaConfig(delta=1e-12, max_iters=100_000, damping=0.0))
    out = class_removal_edit(ctx, theta_hat, kept[:5], removed, cfg)
    np.testing.assert_allclose(out.params, ctx.minimizer(kept), atol=1e-6)


def test_removal_linear_in_tau():
    ctx, removed, kept = quadratic_removal_problem(1)
    theta_hat = ctx.minimizer()
    lissa = LissaConfig(delta=1e-12, max_iters=100_000, damping=0.0)
    steps = [np.linalg.norm(class_removal_edit(ctx, theta_hat, kept, removed,
                                               RemovalConfig(0, tau, lissa)).params - theta_hat)
             for tau in (1e-3, 2e-3, 4e-3)]
    np.testing.assert_allclose(np.array(steps[1:]) / steps[:-1], 2.0, rtol=1e-9)
    assert steps[0] < 1e-2


def test_removal_per_point_matches_group_edit():
    ctx, removed, kept = quadratic_removal_problem(2)
    theta_hat = ctx.minimizer()
    lissa = LissaConfig(delta=1e-12, max_iters=100_000, damping=0.0)
    group = class_removal_edit(ctx, theta_hat, kept, removed, RemovalConfig(0, 1.0, lissa))
    each = class_removal_edit(ctx, theta_hat, kept, removed, RemovalConfig(0, 1.0, lissa, per_point=True))
    np.testing.assert_allclose(each.params, group.params, atol=1e-9)
    assert len(each.telemetry) == removed.size and len(group.telemetry) == 1


def test_removal_overlap_warning_and_errors():
    ctx, removed, kept = quadratic_removal_problem(3)
    theta_hat = ctx.minimizer()
    cfg = RemovalConfig(0, 1.0, LissaConfig(damping=0.0))
    out = class_removal_edit(ctx, theta_hat, np.concatenate([kept[:3], removed[:2]]), removed, cfg)
    assert out.warnings and "2 removed points" in out.warnings[0]
    assert out.telemetry[0].warnings == out.warnings
    with pytest.raises(ValueError):
        class_removal_edit(ctx, theta_hat, kept, [], cfg)


def test_removal_lowers_self_accuracy_on_blobs():
    from infsample.harness import make_blobs
    from infsample.metrics import accuracy
    from infsample.model import Dataset, ModelSpec, TrainConfig, train

    X, y = make_blobs(4, 60, 10, 5.0, 1.0, 7)
    spec = ModelSpec((10, 16, 4), "tanh", 0.01)
    theta = train(spec, Dataset(X, y), TrainConfig(0.1, 200, 32, 0))
    ctx = MLPContext(spec, X, y)
    removed = np.flatnonzero(y == 3)
    S = sorted(RngStream(1).permutation(np.flatnonzero(y != 3))[:60])
    cfg = RemovalConfig(3, 4.0, LissaConfig(damping=0.3))
    out = class_removal_edit(ctx, theta, S, removed, cfg)
    assert accuracy(spec, out.params, X[removed], y[removed]) < accuracy(spec, theta, X[removed], y[removed])
