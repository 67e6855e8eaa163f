"""Independent cross-checks of the derivative, iHVP and influence paths.

Each check pairs the production path with a route that shares none of its
numerics: finite differences, a dense Cholesky solve, or actual retraining.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .harness import make_blobs
from .influence import LissaConfig, MLPContext, direct_ihvp_oracle, lissa_ihvp
from .linalg import RngStream, solve_spd
from .model import Dataset, ModelSpec, TrainConfig, batch_grad, dense_hessian, hvp, mean_loss, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_mlp(seed: int, max_params: int = 200):
    """Random small tanh MLP with a random batch; ``p <= max_params``."""
    rng = RngStream.derive(seed, "random_mlp")
    while True:
        d = int(rng.integers(2, 6))
        hidden = [int(h) for h in rng.integers(2, 8, size=int(rng.integers(1, 3)))]
        Y = int(rng.integers(2, 5))
        spec = ModelSpec((d, *hidden, Y), "tanh", float(rng.uniform(0, 0.05)))
        if spec.param_count <= max_params:
            break
    theta = rng.normal(0, 0.7, size=spec.param_count)
    m = int(rng.integers(3, 9))
    X = rng.normal(size=(m, d))
    y = rng.integers(0, Y, size=m)
    return spec, theta, X, y


def fd_hvp(spec, theta, X, y, v, h=1e-5):
    """Central difference of the gradient along ``v``."""
    return (batch_grad(spec, theta + h * v, X, y) - batch_grad(spec, theta - h * v, X, y)) / (2 * h)


def fd_grad(spec, theta, X, y, coords, h=1e-5):
    ds = Dataset(X, y, n_classes=spec.n_classes)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        e = np.zeros_like(theta)
        e[c] = h
        out[j] = (mean_loss(spec, theta + e, ds) - mean_loss(spec, theta - e, ds)) / (2 * h)
    return out


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def tiny_model(seed: int = 0):
    """Small trained tanh network on 3 Gaussian blobs (p = 51)."""
    X, y = make_blobs(3, 40, 4, 5.0, 1.0, seed)
    spec = ModelSpec((4, 6, 3), "tanh", 0.01)
    theta = train(spec, Dataset(X, y), TrainConfig(0.1, 300, 16, seed))
    return spec, theta, X, y


def logistic_problem(seed: int = 0, n: int = 50, d: int = 10, l2: float = 0.1):
    """Two-class softmax-linear model (p = 2(d+1)) on noisy logistic data."""
    rng = RngStream.derive(seed, "logistic_problem")
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-X @ w))).astype(np.int64)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return ModelSpec((d, 2), "tanh", l2), X, y


def fit_newton(spec, X, y, theta0=None, tol=1e-12, max_iter=100):
    """Exact minimizer of the mean loss by full Newton steps (convex models)."""
    theta = np.zeros(spec.param_count) if theta0 is None else theta0.copy()
    for _ in range(max_iter):
        g = batch_grad(spec, theta, X, y)
        if np.linalg.norm(g) <= tol:
            break
        theta = theta - solve_spd(dense_hessian(spec, theta, X, y), g)
    return theta


def loo_cosines(seed: int = 0, points=None):
    """Cosine similarity between predicted and retrained removal deltas."""
    spec, X, y = logistic_problem(seed)
    n = X.shape[0]
    theta = fit_newton(spec, X, y)
    ctx = MLPContext(spec, X, y)
    cfg = LissaConfig(delta=1e-10, max_iters=100_000, damping=0.0)
    everyone = np.arange(n)
    cosines = []
    for i in (everyone if points is None else points):
        pred = lissa_ihvp(ctx, theta, everyone, ctx.grad(theta, [i]), cfg).vector / n
        keep = everyone != i
        actual = fit_newton(spec, X[keep], y[keep], theta) - theta
        cosines.append(float(pred @ actual / (np.linalg.norm(pred) * np.linalg.norm(actual))))
    return np.array(cosines)


def check_grad(n_models=10):
    worst = 0.0
    for s in range(n_models):
        spec, theta, X, y = random_mlp(s)
        coords = RngStream.derive(s, "coords").permutation(spec.param_count)[:20]
        g = batch_grad(spec, theta, X, y)[coords]
        worst = max(worst, _rel(g, fd_grad(spec, theta, X, y, coords)))
    return CheckResult("grad vs finite differences", worst <= 1e-5, f"max rel err {worst:.2e} (tol 1e-5)")


def check_hvp_fd(n_models=10):
    worst = 0.0
    for s in range(n_models):
        spec, theta, X, y = random_mlp(s)
        v = RngStream.derive(s, "v").normal(size=spec.param_count)
        worst = max(worst, _rel(hvp(spec, theta, X, y, v), fd_hvp(spec, theta, X, y, v)))
    return CheckResult("HVP vs finite differences", worst <= 1e-4, f"max rel err {worst:.2e} (tol 1e-4)")


def check_hvp_dense(n_models=10):
    worst = 0.0
    for s in range(n_models):
        spec, theta, X, y = random_mlp(s, max_params=50)
        v = RngStream.derive(s, "v").normal(size=spec.param_count)
        H = dense_hessian(spec, theta, X, y)
        worst = max(worst, _rel(hvp(spec, theta, X, y, v), H @ v))
    return CheckResult("HVP vs dense Hessian", worst <= 1e-8, f"max rel err {worst:.2e} (tol 1e-8)")


def check_lissa_dense(n_models=5, damping=0.05, delta=1e-6):
    worst, all_converged = 0.0, True
    for s in range(n_models):
        spec, theta, X, y = tiny_model(s)
        ctx = MLPContext(spec, X, y)
        S = np.arange(X.shape[0])
        v = RngStream.derive(s, "rhs").normal(size=spec.param_count)
        res = lissa_ihvp(ctx, theta, S, v, LissaConfig(delta=delta, max_iters=100_000, damping=damping))
        exact = direct_ihvp_oracle(ctx, theta, S, v, damping)
        worst = max(worst, _rel(res.vector, exact))
        all_converged &= res.converged and res.residual <= delta
    ok = worst <= 1e-3 and all_converged
    return CheckResult("LiSSA vs dense solve", ok,
                       f"max rel err {worst:.2e} (tol 1e-3), converged={all_converged}")


def check_loo(n_points=50, required=45):
    cos = loo_cosines(0, None if n_points >= 50 else np.arange(n_points))
    hits = int(np.sum(cos >= 0.9))
    return CheckResult("influence vs leave-one-out retraining", hits >= required,
                       f"{hits}/{cos.size} points with cosine >= 0.9 (need {required}); "
                       f"min cosine {cos.min():.3f}")


def run_suite(quick: bool = False):
    if quick:
        return [check_grad(3), check_hvp_fd(3), check_hvp_dense(3),
                check_lissa_dense(2), check_loo(10, 9)]
    return [check_grad(), check_hvp_fd(), check_hvp_dense(), check_lissa_dense(), check_loo()]
