"""Smooth one-sided penalty, its scaled families and the control-cost transform.

The base penalty ``phi`` vanishes on ``t <= 0``, equals ``t - 1`` on
``t >= 2`` and interpolates with the closed-form C^2 bump
``phi''(t) = (3/4) (1 - (t-1)^2)`` in between, so both branches match with
two continuous derivatives and the interior values (e.g. ``phi(1) = 3/16``)
are exact.  The scaled families are ``psi(eps, t) = phi(t / eps)`` with the
chain-rule derivatives; one ``phi`` backs both the gradient and the
switching penalisation.

``legendre`` is the convex conjugate of ``gamma -> psi(eps, |gamma|^2 -
g^2)``; by isotropy the supremum is radial, and the resulting concave 1-D
problem is solved by bracketed golden-section search.

The ``_scalar`` variants are plain ``math``-only functions so the Monte
Carlo kernels can JIT-compile them unchanged.
"""

from __future__ import annotations

import math

import numpy as np


class InvalidEpsilon(ValueError):
    """Scale parameter of a penalty family must be positive."""


def _phi_scalar(t):
    if t <= 0.0:
        return 0.0
    if t >= 2.0:
        return t - 1.0
    w = t - 1.0
    return 0.75 * (0.5 * w * w - w ** 4 / 12.0 + 2.0 * w / 3.0 + 0.25)


def _phi1_scalar(t):
    if t <= 0.0:
        return 0.0
    if t >= 2.0:
        return 1.0
    w = t - 1.0
    return 0.75 * (w - w ** 3 / 3.0 + 2.0 / 3.0)


def _phi2_scalar(t):
    if t <= 0.0 or t >= 2.0:
        return 0.0
    w = t - 1.0
    return 0.75 * (1.0 - w * w)


_phi_vec = np.frompyfunc(_phi_scalar, 1, 1)
_phi1_vec = np.frompyfunc(_phi1_scalar, 1, 1)
_phi2_vec = np.frompyfunc(_phi2_scalar, 1, 1)


def phi(t):
    """Base penalty; exact on both closed-form branches."""
    if np.isscalar(t):
        return _phi_scalar(float(t))
    return _phi_vec(np.asarray(t, dtype=float)).astype(float)


def phi1(t):
    """First derivative of :func:`phi` (in [0, 1], nondecreasing)."""
    if np.isscalar(t):
        return _phi1_scalar(float(t))
    return _phi1_vec(np.asarray(t, dtype=float)).astype(float)


def phi2(t):
    """Second derivative of :func:`phi` (nonnegative bump on [0, 2])."""
    if np.isscalar(t):
        return _phi2_scalar(float(t))
    return _phi2_vec(np.asarray(t, dtype=float)).astype(float)


def _check_eps(eps):
    if not eps > 0.0:
        raise InvalidEpsilon(f"penalty scale must be > 0, got {eps}")


def psi(eps, t):
    """Scaled penalty ``phi(t / eps)``."""
    _check_eps(eps)
    return phi(np.asarray(t, dtype=float) / eps) if not np.isscalar(t) else _phi_scalar(t / eps)


def psi1(eps, t):
    """Derivative ``phi'(t / eps) / eps``; saturates at ``1 / eps``."""
    _check_eps(eps)
    if np.isscalar(t):
        return _phi1_scalar(t / eps) / eps
    return phi1(np.asarray(t, dtype=float) / eps) / eps


def psi2(eps, t):
    """Second derivative ``phi''(t / eps) / eps^2``."""
    _check_eps(eps)
    if np.isscalar(t):
        return _phi2_scalar(t / eps) / (eps * eps)
    return phi2(np.asarray(t, dtype=float) / eps) / (eps * eps)


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _legendre_radial_scalar(eps, ynorm, gval):
    # sup_{s >= 0} s*|y| - phi((s^2 - g^2)/eps), concave in s; the gradient
    # is negative past max(sqrt(g^2 + 2 eps), eps |y| / 2), which brackets
    # the maximiser.
    if ynorm == 0.0:
        return 0.0
    hi = max(math.sqrt(gval * gval + 2.0 * eps), 0.5 * eps * ynorm) + 1.0
    lo = 0.0

    def val(s):
        return s * ynorm - _phi_scalar((s * s - gval * gval) / eps)

    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    f1, f2 = val(x1), val(x2)
    xtol = 1e-12 * (1.0 + hi)
    while hi - lo > xtol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INVPHI * (hi - lo)
            f2 = val(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INVPHI * (hi - lo)
            f1 = val(x1)
    s = 0.5 * (lo + hi)
    # the conjugate is a supremum over a set containing s = 0, so it is >= 0
    return max(val(s), 0.0)


def legendre(eps, y, gval):
    """Convex conjugate ``sup_gamma <gamma, y> - psi(eps, |gamma|^2 - gval^2)``.

    ``y`` may be a scalar (1-D) or a vector; ``gval >= 0`` is the gradient
    bound at the evaluation point.  Solved to relative tolerance ~1e-10.
    """
    _check_eps(eps)
    if gval < 0:
        raise ValueError("gval must be >= 0")
    ynorm = float(np.linalg.norm(np.atleast_1d(np.asarray(y, dtype=float))))
    return _legendre_radial_scalar(eps, ynorm, gval)
