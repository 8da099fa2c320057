"""Small least-squares solvers: OLS, adaptive least squares, EMA relaxation.

Feature dimensions in this package are tiny (at most five), so the normal
equations are solved directly with a Cholesky factorization. Rank-deficient
systems get a ridge term ``1e-8 * trace(A) / dim`` and are flagged.

Adaptive least squares (ALS) corrects for heteroscedastic noise whose variance
is a known linear function of some residual features:

1. fit OLS;
2. square the residuals;
3. regress them on the residual features without intercept and keep the
   samples with a positive fitted variance;
4. divide targets and features by the fitted standard deviation;
5. refit by OLS without intercept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RIDGE_SCALE = 1e-8
VARIANCE_FLOOR = 1e-12


class FitError(RuntimeError):
    """The regression could not be solved."""


@dataclass(frozen=True)
class RegressionProblem:
    targets: np.ndarray
    features: np.ndarray
    fit_intercept: bool = False

    def __post_init__(self) -> None:
        xi = np.asarray(self.targets, dtype=float).reshape(-1)
        phi = np.asarray(self.features, dtype=float)
        if phi.ndim == 1:
            phi = phi[:, None]
        if phi.shape[0] != xi.size:
            raise ValueError(f"{xi.size} targets but {phi.shape[0]} feature rows")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(phi))):
            raise ValueError("regression data must be finite")
        object.__setattr__(self, "targets", xi)
        object.__setattr__(self, "features", phi)

    def design(self) -> np.ndarray:
        """Feature matrix, with a trailing column of ones when fitting an intercept."""
        if self.fit_intercept:
            return np.column_stack([self.features, np.ones(self.targets.size)])
        return self.features


@dataclass(frozen=True)
class OlsResult:
    weights: np.ndarray
    intercept: float
    fitted: np.ndarray
    ridge: bool


@dataclass(frozen=True)
class AlsDiagnostics:
    ols: OlsResult
    variances: np.ndarray
    dropped: int
    floored: int
    ridge: bool


def solve_normal(design: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients via Cholesky on the normal equations.

    Returns ``(coef, ridge_used)``.
    """
    n, d = design.shape
    if n < d:
        raise FitError(f"{n} samples for {d} coefficients")
    A = design.T @ design
    b = design.T @ targets
    try:
        L = np.linalg.cholesky(A)
        ridge = np.linalg.cond(A) > 1e12
    except np.linalg.LinAlgError:
        ridge = True
    if ridge:
        lam = RIDGE_SCALE * np.trace(A) / d
        if not lam > 0:
            raise FitError("design matrix is identically zero")
        L = np.linalg.cholesky(A + lam * np.eye(d))
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z), bool(ridge)


def ols_fit(problem: RegressionProblem) -> OlsResult:
    """Ordinary least squares."""
    X = problem.design()
    coef, ridge = solve_normal(X, problem.targets)
    fitted = X @ coef
    if problem.fit_intercept:
        return OlsResult(coef[:-1], float(coef[-1]), fitted, ridge)
    return OlsResult(coef, 0.0, fitted, ridge)


def als_fit(problem: RegressionProblem, residual_features: np.ndarray) -> tuple[OlsResult, AlsDiagnostics]:
    """Adaptive least squares (see the module docstring).

    Samples whose fitted residual variance is not positive are dropped,
    unless that would leave fewer samples than coefficients; then the
    variance floor is used for them instead. Positive variances are also
    clipped from below at the floor.
    """
    Z = np.asarray(residual_features, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != problem.targets.size:
        raise ValueError("residual features must have one row per sample")
    first = ols_fit(problem)
    resid2 = (problem.targets - first.fitted) ** 2
    var_coef, ridge_var = solve_normal(Z, resid2)
    var = Z @ var_coef

    X = problem.design()
    keep = var > 0
    floored = 0
    if keep.sum() < X.shape[1]:
        floored = int((~keep).sum())
        keep = np.ones_like(keep)
    dropped = int((~keep).sum())
    if not keep.any():
        raise FitError("every sample was dropped")
    v = np.maximum(var[keep], VARIANCE_FLOOR)
    scale = 1.0 / np.sqrt(v)
    coef, ridge = solve_normal(X[keep] * scale[:, None], problem.targets[keep] * scale)
    fitted = X @ coef
    if problem.fit_intercept:
        result = OlsResult(coef[:-1], float(coef[-1]), fitted, ridge)
    else:
        result = OlsResult(coef, 0.0, fitted, ridge)
    diag = AlsDiagnostics(first, var, dropped, floored, bool(ridge or ridge_var or first.ridge))
    return result, diag


def ema_rate(l: int) -> float:
    if l < 0:
        raise ValueError("iteration index must be nonnegative")
    return min(1.0, 2.0 / (l + 1))


def ema_step(old: np.ndarray, new: np.ndarray, l: int) -> np.ndarray:
    """``old + a (new - old)`` with ``a = min(1, 2 / (l + 1))``."""
    a = ema_rate(l)
    old = np.asarray(old, dtype=float)
    return old + a * (np.asarray(new, dtype=float) - old)
