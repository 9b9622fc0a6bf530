"""Linear SVM trained by dual coordinate descent, with Platt calibration.

The bias is handled by appending a constant 1 to every feature vector, so
the solved problem is

    min_w  1/2 |w|^2 + C * sum_i max(0, 1 - y_i w.[x_i, 1])

and the dual is the box-constrained QP over ``0 <= alpha_i <= C``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import lsq_linear, minimize

log = logging.getLogger(__name__)

GAP_TOL = 1e-6
MAX_EPOCHS = 200_000
PLATT_TOL = 1e-8
PLATT_MAX_ITER = 100


class DegenerateLabels(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvmModel:
    weights: np.ndarray
    bias: float
    calib_a: float
    calib_b: float
    C: float
    duality_gap: float = 0.0

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def margin(self, f) -> np.ndarray | float:
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.dim:
            raise ValueError(f"feature dim {f.shape[-1]} does not match model dim {self.dim}")
        return f @ self.weights + self.bias

    def confidence(self, f):
        return _sigmoid(self.calib_a * self.margin(f) + self.calib_b)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def confidence(m: SvmModel, f) -> float:
    """Calibrated score ``sigmoid(a * margin + b)`` in [0, 1]."""
    return m.confidence(f)


def primal_objective(w_aug: np.ndarray, xa: np.ndarray, y: np.ndarray, C: float) -> float:
    hinge = np.maximum(0.0, 1.0 - y * (xa @ w_aug))
    return float(0.5 * w_aug @ w_aug + C * hinge.sum())


def dual_objective(alpha: np.ndarray, xa: np.ndarray, y: np.ndarray) -> float:
    w = (alpha * y) @ xa
    return float(alpha.sum() - 0.5 * w @ w)


@njit(cache=True)
def _dual_cd(xa, y, C, tol, max_epochs, alpha):
    n, d = xa.shape
    w = np.zeros(d)
    for i in range(n):
        if alpha[i] != 0.0:
            w += alpha[i] * y[i] * xa[i]
    qd = np.empty(n)
    for i in range(n):
        qd[i] = xa[i] @ xa[i]
    gap = np.inf
    epoch = 0
    while epoch < max_epochs:
        for t in range(n):
            # alternate sweep direction
            i = t if epoch % 2 == 0 else n - 1 - t
            if qd[i] <= 0.0:
                continue
            g = y[i] * (w @ xa[i]) - 1.0
            a_old = alpha[i]
            a_new = min(max(a_old - g / qd[i], 0.0), C)
            if a_new != a_old:
                w += (a_new - a_old) * y[i] * xa[i]
                alpha[i] = a_new
        epoch += 1
        # refresh w from alpha to stop round-off drift, then measure the gap
        w[:] = 0.0
        for i in range(n):
            if alpha[i] != 0.0:
                w += alpha[i] * y[i] * xa[i]
        hinge = 0.0
        for i in range(n):
            m = 1.0 - y[i] * (w @ xa[i])
            if m > 0.0:
                hinge += m
        ww = w @ w
        gap = (0.5 * ww + C * hinge) - (alpha.sum() - 0.5 * ww)
        if gap <= tol:
            break
    return alpha, w, gap, epoch


def _polish(alpha, xa, y, C):
    """Re-solve the multipliers of the current free set, others held at their bounds.

    Coordinate descent finds the active set long before it pins down the free
    multipliers when the Gram matrix is rank deficient (duplicated or
    collinear samples).  A bounded least-squares solve of the free-set KKT
    equations finishes the job.  Returns ``None`` when there is nothing to do.
    """
    eps = 1e-12 * max(C, 1.0)
    free = (alpha > eps) & (alpha < C - eps)
    if not free.any():
        return None
    z = y[:, None] * xa
    upper = alpha >= C - eps
    rhs = 1.0 - z[free] @ (C * z[upper].sum(axis=0))
    sol = lsq_linear(z[free] @ z[free].T, rhs, bounds=(0.0, C), method="bvls", tol=1e-14).x
    out = np.where(upper, C, 0.0)
    out[free] = sol
    return out


def _quasi_newton(alpha, xa, y, C):
    z = y[:, None] * xa

    def neg_dual(a):
        v = z.T @ a
        return 0.5 * v @ v - a.sum(), z @ v - 1.0

    r = minimize(neg_dual, alpha, jac=True, method="L-BFGS-B", bounds=[(0.0, C)] * len(y),
                 options=dict(maxiter=20000, ftol=1e-16, gtol=1e-12, maxcor=30))
    a = np.clip(r.x, 0.0, C)
    return a if dual_objective(a, xa, y) > dual_objective(alpha, xa, y) else alpha


def solve_dual(features, labels, C: float = 1.0, tol: float = GAP_TOL):
    """Run dual coordinate descent; returns ``(alpha, w_aug, gap)``."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    alpha = np.zeros(len(y))
    epochs = 0
    chunk = 50
    gap = np.inf
    while epochs < MAX_EPOCHS:
        alpha, w, gap, done = _dual_cd(xa, y, float(C), float(tol), min(chunk, MAX_EPOCHS - epochs), alpha)
        epochs += done
        if gap <= tol:
            break
        if chunk == 50:
            # coordinate descent crawls on rank-deficient Gram matrices;
            # a quasi-Newton pass gets close to the right face quickly
            alpha = _quasi_newton(alpha, xa, y, float(C))
        cand = _polish(alpha, xa, y, float(C))
        if cand is not None and dual_objective(cand, xa, y) > dual_objective(alpha, xa, y):
            alpha = cand
        chunk = min(2 * chunk, 500)
    if gap <= tol:
        # one exact solve on the final free set usually lands on round-off
        cand = _polish(alpha, xa, y, float(C))
        if cand is not None:
            w_c = (cand * y) @ xa
            gap_c = primal_objective(w_c, xa, y, C) - dual_objective(cand, xa, y)
            if 0.0 <= gap_c < gap:
                alpha, w, gap = cand, w_c, gap_c
    if gap > tol:
        raise ConvergenceError(f"duality gap {gap:.3e} above {tol:.1e} after {epochs} epochs")
    return alpha, w, gap


def platt_fit(margins, labels, tol: float = PLATT_TOL, max_iter: int = PLATT_MAX_ITER):
    """Fit ``P(y=+1 | m) = sigmoid(a*m + b)`` by Newton's method.

    Follows Platt's smoothed targets with the Lin-Lin-Weng safeguards
    (Hessian ridge, backtracking).  Returns ``(a, b)`` or ``None`` when the
    gradient norm does not drop to ``tol``.
    """
    f = np.asarray(margins, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y > 0))
    n_neg = len(y) - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y > 0, hi, lo)
    # Platt's parameterization: p = 1 / (1 + exp(A f + B))
    A = 0.0
    B = math.log((n_neg + 1.0) / (n_pos + 1.0))

    def objective(A, B):
        z = f * A + B
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)),
                                     (t - 1.0) * z + np.log1p(np.exp(z)))))

    fval = objective(A, B)
    for _ in range(max_iter):
        z = f * A + B
        p = np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-z)), 1.0 / (1.0 + np.exp(z)))
        q = 1.0 - p
        d2 = p * q
        h11 = float(np.sum(f * f * d2)) + 1e-12
        h22 = float(np.sum(d2)) + 1e-12
        h21 = float(np.sum(f * d2))
        d1 = t - p
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if math.hypot(g1, g2) <= tol:
            return -A, -B
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        if abs(gd) <= 1e-12 * max(1.0, abs(fval)):
            # the objective is flat to round-off; Armijo cannot tell steps
            # apart, so take the Newton step and let the gradient decide
            A, B = A + dA, B + dB
            fval = objective(A, B)
            continue
        step = 1.0
        while step >= 1e-10:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            break
    # accept a final point that meets the tolerance
    z = f * A + B
    p = np.where(z >= 0, np.exp(-z) / (1.0 + np.exp(-z)), 1.0 / (1.0 + np.exp(z)))
    d1 = t - p
    if math.hypot(float(np.sum(f * d1)), float(np.sum(d1))) <= tol:
        return -A, -B
    return None


def train_svm(features, labels, C: float = 1.0, tol: float = GAP_TOL) -> SvmModel:
    """Train a calibrated linear SVM on ``features`` with ``labels`` in {+1, -1}."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: features {x.shape}, labels {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateLabels("degenerate labels")
    _, w_aug, gap = solve_dual(x, y, C, tol)
    weights, bias = w_aug[:-1].copy(), float(w_aug[-1])
    margins = x @ weights + bias
    calib = platt_fit(margins, y)
    if calib is None or not calib[0] > 0:
        log.warning("Platt fit did not converge; using fallback calibration a=2, b=0")
        calib = (2.0, 0.0)
    return SvmModel(weights, bias, float(calib[0]), float(calib[1]), float(C), float(gap))
