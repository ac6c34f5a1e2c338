"""Dense convex QP solver (primal-dual interior point, Mehrotra predictor-corrector).

Solves ``min 0.5 x'Hx + g'x  s.t.  A x <= b`` for small dense problems. Every
step is a Newton step on the perturbed KKT system, reduced to a Cholesky solve (LAPACK via scipy)
on ``H + A' (Z/S) A``. Iteration order is fixed, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class QPResult:
    x: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    residual: float


def _step_to_boundary(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0.0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _shift_positive(v: np.ndarray) -> np.ndarray:
    a = -float(np.min(v))
    if a < -1e-8 * max(1.0, float(np.max(np.abs(v)))):
        return v
    return v + (1.0 + a)


def solve_qp(H, g, A, b, tol: float = 1e-9, max_iter: int = 60) -> QPResult:
    """Solve the inequality-constrained QP.

    ``status`` is ``"optimal"``, ``"max-iter"`` or ``"infeasible"`` (the last when
    the iterates diverge). The starting point is the least-squares one used by
    most conic IP codes: minimize ``0.5 x'Hx + g'x + 0.5 |b - Ax|^2`` and shift
    slacks and multipliers into the positive orthant.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, g.size)
    b = np.asarray(b, dtype=float)
    n, m = g.size, b.size

    if m == 0:
        x = -np.linalg.solve(H, g)
        return QPResult(x, np.zeros(0), "optimal", 0, 0.0)

    x = np.linalg.solve(H + A.T @ A, A.T @ b - g)
    z = A @ x - b
    s = _shift_positive(-z)
    z = _shift_positive(z)
    scale_d = 1.0 + np.max(np.abs(g))
    scale_p = 1.0 + np.max(np.abs(b))
    status = "max-iter"
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ x + g + A.T @ z
        r_p = A @ x + s - b
        gap = float(s @ z)
        mu = gap / m
        obj = 0.5 * float(x @ H @ x) + float(g @ x)
        res = max(np.max(np.abs(r_d)) / scale_d, np.max(np.abs(r_p)) / scale_p, gap / (1.0 + abs(obj)))
        if res < tol:
            status = "optimal"
            break
        if mu > 1e30 or not np.isfinite(mu):
            status = "infeasible"
            break
        w = z / s
        K = H + (A.T * w) @ A
        try:
            fac = cho_factor(K, check_finite=False)
        except np.linalg.LinAlgError:
            K = K + 1e-10 * (1.0 + np.max(np.abs(np.diag(K)))) * np.eye(n)
            fac = cho_factor(K, check_finite=False)

        def reduced(e_d, e_p, e_c):
            dx = cho_solve(fac, -e_d - A.T @ ((z * e_p - e_c) / s), check_finite=False)
            ds = -e_p - A @ dx
            return dx, ds, (-e_c - z * ds) / s

        def newton(r_c):
            dx, ds, dz = reduced(r_d, r_p, r_c)
            # iterative refinement on the unreduced system; the reduced matrix
            # loses accuracy once z/s spans many decades near the solution
            for _ in range(2):
                e_d = H @ dx + A.T @ dz + r_d
                e_p = A @ dx + ds + r_p
                e_c = z * ds + s * dz + r_c
                cx, cs, cz = reduced(e_d, e_p, e_c)
                dx, ds, dz = dx + cx, ds + cs, dz + cz
            return dx, ds, dz

        # predictor (affine scaling)
        dx, ds, dz = newton(s * z)
        a_aff = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3
        # corrector with centering
        dx, ds, dz = newton(s * z + ds * dz - sigma * mu)
        alpha = 0.99 * min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
        alpha = min(alpha, 1.0)
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
    return QPResult(x, z, status, it, float(res))
