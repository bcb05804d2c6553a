"""LQG synthesis for the extended sampled-data system under Bernoulli measurement loss.

The estimator is the time-varying Kalman filter gated by the delivery
indicator; the controller is the certainty-equivalent Riccati feedback with
the cross-weight ``Xi_xu`` kept explicit.  Stationary performance is
bracketed by two modified Riccati fixed points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_discrete_lyapunov

from .discretize import DiscretePlant

LOEWNER_TOL = 1e-9
FIXED_POINT_TOL = 1e-10
MAX_ITER = 100_000
DIVERGENCE_TRACE = 1e12


class EstimatorError(np.linalg.LinAlgError):
    pass


class RiccatiDivergence(RuntimeError):
    pass


def sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def loewner_leq(x: np.ndarray, y: np.ndarray, tol: float = LOEWNER_TOL) -> bool:
    """``x <= y`` in the Loewner order, up to ``tol`` on the smallest eigenvalue."""
    return float(np.min(np.linalg.eigvalsh(sym(y - x)))) >= -tol


def _innovation_solve(s: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(s), rhs)
    except LinAlgError:
        raise EstimatorError("innovation covariance C P C^T + R_w is singular") from None


# operators used in the monotonicity arguments

def op_f(x, phi, rv_tilde):
    return phi @ x @ phi.T + rv_tilde


def op_h(x, rho, c, rw):
    """``X - rho X C^T (C X C^T + R_w)^{-1} C X``."""
    pct = x @ c.T
    s = c @ pct + rw
    if s.shape == (1, 1):
        if not s[0, 0] > 0:
            raise EstimatorError("innovation covariance C P C^T + R_w is singular")
        return sym(x - (rho / s[0, 0]) * (pct @ pct.T))
    return sym(x - rho * pct @ _innovation_solve(s, pct.T))


def op_g(x, rho, phi, rv_tilde, c, rw):
    return op_h(op_f(x, phi, rv_tilde), rho, c, rw)


@dataclass(frozen=True, eq=False)
class EstimatorState:
    xi_hat: np.ndarray
    p_cov: np.ndarray


def kalman_predict(state: EstimatorState, dp: DiscretePlant, u: np.ndarray) -> EstimatorState:
    xi = dp.phi @ state.xi_hat + dp.gamma @ np.atleast_1d(u)
    p = sym(dp.phi @ state.p_cov @ dp.phi.T + dp.rv_tilde)
    return EstimatorState(xi, p)


def kalman_correct(pred: EstimatorState, dp: DiscretePlant, rho: int,
                   y: Optional[np.ndarray]) -> EstimatorState:
    """Measurement update; a lost packet (``rho == 0``) leaves the prediction untouched."""
    if bool(rho) != (y is not None):
        raise ValueError("a measurement must be given exactly when it was delivered")
    if not rho:
        return pred
    c = dp.c_ext
    pct = pred.p_cov @ c.T
    s = c @ pct + dp.rw
    gain = _innovation_solve(s, pct.T).T
    xi = pred.xi_hat + gain @ (np.atleast_1d(y) - c @ pred.xi_hat)
    p = sym(pred.p_cov - gain @ c @ pred.p_cov)
    return EstimatorState(xi, p)


def kalman_step(state: EstimatorState, dp: DiscretePlant, u_prev, rho_k: int,
                y_k=None) -> EstimatorState:
    """From ``(xi_{k|k}, P_{k|k})`` and ``u_k`` to ``(xi_{k+1|k+1}, P_{k+1|k+1})``."""
    return kalman_correct(kalman_predict(state, dp, u_prev), dp, rho_k, y_k)


@dataclass(frozen=True, eq=False)
class CovarianceBounds:
    """Stationary prediction-form bounds on the expected error covariance.

    ``p_lower_post``/``p_upper_post`` are the matching filtered (posterior)
    bounds.  Non-converged bounds are reported as ``inf`` matrices.
    """

    p_lower: np.ndarray
    p_upper: np.ndarray
    p_lower_post: np.ndarray
    p_upper_post: np.ndarray
    rho: float
    converged: bool
    iterations: int
    lower_converged: bool = True


def _diverged_matrix(k):
    return np.full((k, k), np.inf)


def covariance_bounds(dp: DiscretePlant, rho: float, tol: float = FIXED_POINT_TOL,
                      max_iter: int = MAX_ITER) -> CovarianceBounds:
    """Fixed points of the two modified Riccati recursions for delivery probability ``rho``.

    The upper recursion is iterated from ``P_{0|-1}`` until the largest
    entry-wise change drops below ``tol`` (scaled by ``max(1, max|P|)``);
    it is declared divergent when its trace exceeds 1e12 or the iteration
    cap is hit.  The lower fixed point solves a discrete Lyapunov equation
    whose existence requires ``(1 - rho) * spectral_radius(Phi)^2 < 1``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    k = dp.dim
    phi, rvt, c, rw = dp.phi, dp.rv_tilde, dp.c_ext, dp.rw

    radius = float(np.max(np.abs(np.linalg.eigvals(phi))))
    lower_ok = (1.0 - rho) * radius ** 2 < 1.0
    if lower_ok:
        p_low = sym(solve_discrete_lyapunov(math.sqrt(1.0 - rho) * phi, rvt))
        p_low_post = (1.0 - rho) * p_low
    else:
        p_low = p_low_post = _diverged_matrix(k)

    p = sym(dp.p0.copy())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pct = p @ c.T
        corr = phi @ pct @ _innovation_solve(c @ pct + rw, pct.T) @ phi.T
        nxt = sym(phi @ p @ phi.T + rvt - rho * corr)
        change = float(np.max(np.abs(nxt - p)))
        p = nxt
        if not np.all(np.isfinite(p)) or np.trace(p) > DIVERGENCE_TRACE:
            break
        if change < tol * max(1.0, float(np.max(np.abs(p)))):
            converged = True
            break
    if converged:
        p_up, p_up_post = p, op_h(p, rho, c, rw)
    else:
        p_up = p_up_post = _diverged_matrix(k)
    return CovarianceBounds(p_low, p_up, p_low_post, p_up_post, float(rho), converged, it,
                            lower_ok)


@dataclass(frozen=True, eq=False)
class ControllerGains:
    s_inf: np.ndarray
    l_inf: np.ndarray
    s_seq: Optional[np.ndarray] = None
    l_seq: Optional[np.ndarray] = None
    iterations: int = 0

    @property
    def finite(self) -> bool:
        return self.s_seq is not None


def _riccati_step(s, dp):
    phi, gam = dp.phi, dp.gamma
    m_uu = gam.T @ s @ gam + dp.xi_uu
    n_ux = gam.T @ s @ phi + dp.xi_xu.T
    m_uu = sym(m_uu)
    try:
        gain = -cho_solve(cho_factor(m_uu), n_ux)
    except LinAlgError:
        # input has no effect on the remaining cost; any minimiser will do
        gain = -np.linalg.pinv(m_uu) @ n_ux
    s_new = sym(phi.T @ s @ phi + dp.xi_xx + n_ux.T @ gain)
    return s_new, gain


def riccati_residual(s: np.ndarray, dp: DiscretePlant) -> float:
    """Spectral norm of the stationary control Riccati equation residual."""
    s_new, _ = _riccati_step(s, dp)
    return float(np.linalg.norm(s_new - s, 2))


def riccati_control(dp: DiscretePlant, finite_horizon: bool = False,
                    tol: float = FIXED_POINT_TOL, max_iter: int = MAX_ITER) -> ControllerGains:
    """Iterate the control Riccati recursion from the terminal weight.

    The stationary solution is reached when the spectral-norm change falls
    below ``tol * max(1, ||S||)``.  With ``finite_horizon=True`` the whole
    backward sequence ``S_0..S_N`` and gains ``L_0..L_{N-1}`` for
    ``N = dp.n_steps`` are returned as well.
    """
    s = sym(dp.xi0.copy())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s_new, gain = _riccati_step(s, dp)
        change = float(np.linalg.norm(s_new - s, 2))
        s = s_new
        if not np.all(np.isfinite(s)):
            break
        if change < tol * max(1.0, float(np.linalg.norm(s, 2))):
            converged = True
            break
    if not converged:
        raise RiccatiDivergence(f"control Riccati recursion did not converge in {it} iterations")
    # slow contraction leaves an error well above the step size; iterate while it shrinks
    for _ in range(max_iter):
        s_new, _ = _riccati_step(s, dp)
        step = float(np.linalg.norm(s_new - s, 2))
        s = s_new
        if step >= change or step == 0.0:
            break
        change = step
    s_inf = s
    _, l_inf = _riccati_step(s_inf, dp)
    if not finite_horizon:
        return ControllerGains(s_inf, l_inf, iterations=it)

    n = dp.n_steps
    if n is None:
        raise ValueError("finite-horizon gains need a finite horizon")
    k, m = dp.dim, dp.m
    s_seq = np.empty((n + 1, k, k))
    l_seq = np.empty((n, m, k))
    s_seq[n] = sym(dp.xi0)
    step = n - 1
    while step >= 0:
        s_seq[step], l_seq[step] = _riccati_step(s_seq[step + 1], dp)
        scale = max(1.0, float(np.max(np.abs(s_seq[step]))))
        if np.max(np.abs(s_seq[step] - s_seq[step + 1])) <= 1e-15 * scale:
            # stationary to machine precision; the rest repeats
            s_seq[:step] = s_seq[step]
            l_seq[:step] = l_seq[step]
            break
        step -= 1
    return ControllerGains(s_inf, l_inf, s_seq, l_seq, iterations=it)


@dataclass(frozen=True)
class CostBounds:
    """Per-step stationary cost bounds."""

    j_min: float
    j_max: float


def _delta(s_next, s_cur, dp):
    return dp.phi.T @ s_next @ dp.phi + dp.xi_xx - s_cur


def cost_bounds(dp: DiscretePlant, gains: ControllerGains, bounds: CovarianceBounds,
                rho: float) -> CostBounds:
    """Stationary per-step lower and upper bounds on the LQG loss."""
    s = gains.s_inf
    base = float(np.trace(s @ dp.rv_tilde))
    delta = _delta(s, s, dp)
    if bounds.lower_converged:
        j_min = base + (1.0 - rho) * float(np.trace(delta @ bounds.p_lower))
    else:
        j_min = math.inf
    if bounds.converged:
        j_max = base + float(np.trace(delta @ op_h(bounds.p_upper, rho, dp.c_ext, dp.rw)))
    else:
        j_max = math.inf
    return CostBounds(j_min, j_max)


def stationary_bounds(dp: DiscretePlant, rho: float, gains: Optional[ControllerGains] = None):
    """Convenience: ``(CostBounds, CovarianceBounds)`` for ``rho``."""
    gains = gains if gains is not None else riccati_control(dp)
    cov = covariance_bounds(dp, rho)
    return cost_bounds(dp, gains, cov, rho), cov


def _prior_mean(dp, x0):
    if x0 is None:
        return np.zeros(dp.dim)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size == dp.n:
        x0 = np.concatenate([x0, np.zeros(dp.m)])
    if x0.size != dp.dim:
        raise ValueError(f"x0 must have {dp.n} or {dp.dim} entries")
    return x0


def _deterministic_part(dp, gains, x0):
    s_seq = gains.s_seq
    xi0 = _prior_mean(dp, x0)
    rvt = dp.rv_tilde
    const = float(xi0 @ s_seq[0] @ xi0) + float(np.trace(s_seq[0] @ dp.p0))
    const += float(np.einsum("kij,ji->", s_seq[1:], rvt))
    return const


def _require_finite(gains, n):
    if not gains.finite:
        raise ValueError("finite-horizon gains are required")
    if gains.s_seq.shape[0] != n + 1:
        raise ValueError(f"gains cover {gains.s_seq.shape[0] - 1} steps, sequence has {n}")


def finite_horizon_cost(dp: DiscretePlant, gains: ControllerGains, loss_sequence,
                        x0=None) -> float:
    """Optimal finite-horizon loss given one realised delivery sequence.

    ``loss_sequence[k]`` is 1 when sample ``k`` was delivered.  ``x0`` is
    the prior mean of the initial state (zero by default); the prior
    covariance is ``dp.p0``.  The expectation over delivery sequences is
    left to the caller.
    """
    seq = np.asarray(loss_sequence, dtype=int).ravel()
    n = seq.size
    _require_finite(gains, n)
    total = _deterministic_part(dp, gains, x0)
    s_seq = gains.s_seq
    c, rw, phi, rvt = dp.c_ext, dp.rw, dp.phi, dp.rv_tilde
    p = sym(dp.p0.copy())
    for k in range(n):
        if seq[k]:
            p = op_h(p, 1.0, c, rw)
        total += float(np.trace(_delta(s_seq[k + 1], s_seq[k], dp) @ p))
        p = sym(phi @ p @ phi.T + rvt)
    return total


def covariance_path(dp: DiscretePlant, loss_sequence) -> np.ndarray:
    """Realised filtered covariances ``P_{k|k}`` for ``k = 0..N-1``."""
    seq = np.asarray(loss_sequence, dtype=int).ravel()
    out = np.empty((seq.size, dp.dim, dp.dim))
    p = sym(dp.p0.copy())
    for k, r in enumerate(seq):
        if r:
            p = op_h(p, 1.0, dp.c_ext, dp.rw)
        out[k] = p
        p = sym(dp.phi @ p @ dp.phi.T + dp.rv_tilde)
    return out


def finite_horizon_cost_batch(dp: DiscretePlant, gains: ControllerGains,
                              delivered: np.ndarray, x0=None) -> np.ndarray:
    """Vectorised :func:`finite_horizon_cost` over replicates.

    ``delivered`` is a boolean ``(R, N)`` array.  Only valid for a single
    measured output, which keeps the innovation a scalar.
    """
    delivered = np.asarray(delivered, dtype=bool)
    reps, n = delivered.shape
    _require_finite(gains, n)
    if dp.c_ext.shape[0] != 1:
        return np.array([finite_horizon_cost(dp, gains, row, x0) for row in delivered])
    const = _deterministic_part(dp, gains, x0)
    s_seq = gains.s_seq
    c = dp.c_ext[0]
    rw = float(dp.rw[0, 0])
    phi, rvt = dp.phi, dp.rv_tilde
    k = dp.dim
    p = np.broadcast_to(sym(dp.p0), (reps, k, k)).copy()
    total = np.full(reps, const)
    for step in range(n):
        pc = p @ c
        s = pc @ c + rw
        upd = np.einsum("ri,rj->rij", pc, pc) / s[:, None, None]
        p = p - delivered[:, step, None, None] * upd
        p = sym(p)
        delta = _delta(s_seq[step + 1], s_seq[step], dp)
        total += np.einsum("ij,rji->r", delta, p)
        p = phi @ p @ phi.T + rvt
    return total


def finite_horizon_bounds(dp: DiscretePlant, gains: ControllerGains, rho: float, x0=None):
    """``(J_N^min, J_N^max)``: the finite-horizon loss with the expected covariance
    replaced by its iterated lower and upper bounds.

    A bound whose recursion overflows is reported as ``inf``.
    """
    n = gains.s_seq.shape[0] - 1 if gains.finite else None
    _require_finite(gains, n)
    with np.errstate(over="ignore", invalid="ignore"):
        return _finite_bounds(dp, gains, rho, n, x0)


def _finite_bounds(dp, gains, rho, n, x0):
    const = _deterministic_part(dp, gains, x0)
    s_seq = gains.s_seq
    c, rw, phi, rvt = dp.c_ext, dp.rw, dp.phi, dp.rv_tilde
    p_up = sym(dp.p0.copy())
    p_low = sym(dp.p0.copy())
    j_low = j_up = const
    # S_k is constant on [0, steady_end); once both covariance recursions are
    # stationary as well the remaining terms there are identical.
    steady_end = 0
    while steady_end < n and np.array_equal(s_seq[steady_end], s_seq[steady_end + 1]):
        steady_end += 1
    k = 0
    up_alive = True
    while k < n:
        delta = _delta(s_seq[k + 1], s_seq[k], dp)
        term_up = 0.0
        if up_alive:
            try:
                post_up = op_h(p_up, rho, c, rw)
            except EstimatorError:
                post_up = _diverged_matrix(p_up.shape[0])
            term_up = float(np.trace(delta @ post_up))
            nxt_up = sym(phi @ post_up @ phi.T + rvt)
            j_up += term_up
            if not (math.isfinite(j_up) and np.all(np.isfinite(nxt_up))):
                # the lower recursion carries on alone
                up_alive, j_up = False, math.inf
        post_low = (1.0 - rho) * p_low
        term_low = float(np.trace(delta @ post_low))
        nxt_low = sym(phi @ post_low @ phi.T + rvt)
        j_low += term_low
        if not (math.isfinite(j_low) and np.all(np.isfinite(nxt_low))):
            return math.inf, math.inf
        if (k + 1 < steady_end and _same(nxt_low, p_low)
                and (not up_alive or _same(nxt_up, p_up))):
            reps = steady_end - (k + 1)
            j_up += reps * term_up
            j_low += reps * term_low
            k = steady_end
        else:
            k += 1
        p_low = nxt_low
        if up_alive:
            p_up = nxt_up
    return j_low, j_up


def _same(a, b, rtol=1e-15):
    scale = max(1.0, float(np.max(np.abs(b))))
    return bool(np.all(np.isfinite(a))) and float(np.max(np.abs(a - b))) <= rtol * scale
