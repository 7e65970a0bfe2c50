"""Penalized Hamiltonian H(y) = sup_p { y p - psi_eps(p^2 - a^2) } and feedback map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .approx import SmoothPenalty
from .errors import NumericalError


@dataclass(frozen=True)
class HamiltonianQuery:
    y: float
    a: float
    eps: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("cost a must be positive")


def hamiltonian_eval(query: HamiltonianQuery, max_iter: int = 200) -> tuple[float, float]:
    """Return (H, p*) for one query.

    The objective is concave in p.  For y > 0 the maximizer satisfies
    y = 2 p psi'(p^2 - a^2) with p >= a; the left side is increasing there,
    so a bracketed root-find is safe.  Negative y follows by symmetry.
    """
    y, a, eps = float(query.y), float(query.a), float(query.eps)
    if y == 0.0:
        return 0.0, 0.0
    pen = SmoothPenalty(eps)
    ay = abs(y)
    slope = lambda p: 2.0 * p * float(pen.psi_prime(p * p - a * a)) - ay
    lo, hi = a, a + eps * ay / 2.0 + 2.0 * a
    for _ in range(max_iter):
        if slope(hi) > 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise NumericalError(f"no bracket for p*: y={y}, a={a}, eps={eps}, last=[{lo}, {hi}]")
    try:
        p = brentq(slope, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=max_iter)
    except RuntimeError as exc:
        raise NumericalError(f"root-find failed on [{lo}, {hi}] for y={y}: {exc}") from exc
    p = float(np.copysign(p, y))
    return y * p - float(pen.psi(p * p - a * a)), p


def hamiltonian(y: float, a: float, eps: float) -> float:
    return hamiltonian_eval(HamiltonianQuery(y, a, eps))[0]


def feedback_drift(dudx, a, eps):
    """Optimal control rate -2 psi'(u_x^2 - a^2) u_x."""
    dudx = np.asarray(dudx, float)
    out = -2.0 * SmoothPenalty(eps).psi_prime(dudx * dudx - np.asarray(a, float) ** 2) * dudx
    return out if out.ndim else float(out)


def conjugate_at(p0, a, eps):
    """(y0, H(y0)) for y0 = d/dp psi(p^2 - a^2) at p0, in closed form.

    Used by the PDE solver: the tangent of -psi at p0 is H(y0) - y0 p.
    """
    pen = SmoothPenalty(eps)
    p0 = np.asarray(p0, float)
    z = p0 * p0 - np.asarray(a, float) ** 2
    y0 = 2.0 * p0 * pen.psi_prime(z)
    return y0, y0 * p0 - pen.psi(z)
