"""Small quadrature helpers used by the tabulated backbones."""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 50) -> float:
    """Integrate a scalar function on [a, b] by adaptive Simpson with Richardson correction."""

    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        delta = left + right - whole
        if abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        if depth <= 0:
            raise ConvergenceError(f"adaptive Simpson exceeded depth on [{lo}, {hi}]", gap=abs(delta))
        return recurse(lo, mid, fa, flm, fm, left, 0.5 * eps, depth - 1) + recurse(
            mid, hi, fm, frm, fb, right, 0.5 * eps, depth - 1
        )

    if a == b:
        return 0.0
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def gauss_legendre(f, a, b):
    """Fixed 12-point Gauss-Legendre rule on [a, b], vectorized over array endpoints."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pts = mid[..., None] + half[..., None] * _GL_NODES
    return half * np.sum(_GL_WEIGHTS * f(pts), axis=-1)
