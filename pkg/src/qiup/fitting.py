"""Small Levenberg-Marquardt least-squares solver with analytic Jacobians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import FitError


@dataclass(frozen=True)
class LMResult:
    params: np.ndarray
    covariance: np.ndarray
    rmse: float
    iterations: int
    converged: bool


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    p0,
    xtol: float = 1e-10,
    max_iter: int = 200,
    lam0: float = 1e-3,
) -> LMResult:
    """Minimize ``sum(residual(p)**2)``.

    Damped Gauss-Newton steps ``(J^T J + lam diag(J^T J)) dp = -J^T r``;
    ``lam`` shrinks after an accepted step and grows after a rejected one.
    Converges when the relative step ``|dp| / (|p| + xtol)`` drops below
    ``xtol`` (or the cost stops changing at round-off), else raises
    :class:`FitError` after ``max_iter`` iterations.

    The covariance is ``s^2 (J^T J)^-1`` with ``s^2 = cost / (n - p)``.
    """
    p = np.asarray(p0, dtype=float).copy()
    r = residual(p)
    cost = float(r @ r)
    lam = lam0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = jacobian(p)
        jtj = jac.T @ jac
        grad = jac.T @ r
        scale = np.diag(jtj).copy()
        scale[scale == 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(scale), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + step
            r_trial = residual(trial)
            cost_trial = float(r_trial @ r_trial)
            if np.isfinite(cost_trial) and cost_trial <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left: already at a (numerical) minimum
            converged = True
            break
        rel_step = np.linalg.norm(step) / (np.linalg.norm(p) + xtol)
        cost_change = cost - cost_trial
        p, r, cost = trial, r_trial, cost_trial
        lam = max(lam / 10.0, 1e-12)
        if rel_step < xtol or cost_change <= 1e-30 + 1e-15 * cost:
            converged = True
            break
    if not converged:
        raise FitError(f"Levenberg-Marquardt did not converge in {max_iter} iterations")
    jac = jacobian(p)
    n, k = jac.shape
    dof = max(n - k, 1)
    try:
        cov = np.linalg.inv(jac.T @ jac) * (cost / dof)
    except np.linalg.LinAlgError:
        cov = np.full((k, k), np.inf)
    return LMResult(p, cov, float(np.sqrt(cost / n)), it, converged)
