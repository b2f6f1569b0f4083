"""Real orthonormal spherical harmonics and their surface gradients.

Each harmonic is written as ``Y_l^m(s) = c_lm * A_m(x, y) * q_lm(z)`` where
``A_m`` is the real or imaginary part of ``(x + iy)^|m|`` and ``q_lm`` is the
``|m|``-th derivative of the Legendre polynomial ``P_l``. This is a smooth
function on all of R^3, so the surface gradient is the tangential
projection of its ambient gradient and no pole special-casing is needed.
"""
from __future__ import annotations

from functools import lru_cache
from math import factorial, pi, sqrt

import numpy as np
from numpy.polynomial import Legendre, Polynomial

from .errors import InputError

POLE_TOL = 1e-6


def n_basis(order: int, start: int = 0) -> int:
    """Number of (l, m) pairs with ``start <= l <= order``."""
    return (order + 1) ** 2 - start**2


def lm_pairs(order: int, start: int = 0) -> list:
    return [(l, m) for l in range(start, order + 1) for m in range(-l, l + 1)]


@lru_cache(maxsize=None)
def _legendre_deriv(l: int, m: int):
    p = Legendre.basis(l).deriv(m).convert(kind=Polynomial)
    return p, p.deriv()


def _norm(l: int, m: int) -> float:
    am = abs(m)
    c = sqrt((2 * l + 1) / (4 * pi) * factorial(l - am) / factorial(l + am))
    return c * sqrt(2.0) if m != 0 else c


def _check(l, m):
    if l < 0 or abs(m) > l:
        raise InputError(f"invalid harmonic degree/order l={l}, m={m}")


def _azimuthal(m: int, x, y):
    """``A_m`` and its x/y partial derivatives."""
    am = abs(m)
    if am == 0:
        one = np.ones_like(x)
        return one, np.zeros_like(x), np.zeros_like(x)
    w = x + 1j * y
    val = w**am
    d = am * w ** (am - 1)
    if m > 0:
        return val.real, d.real, (1j * d).real
    return val.imag, d.imag, (1j * d).imag


def real_sph_harmonic(l: int, m: int, s) -> np.ndarray:
    """Real orthonormal ``Y_l^m`` at unit vectors ``s`` (shape (..., 3))."""
    _check(l, m)
    s = np.asarray(s, dtype=float)
    q, _ = _legendre_deriv(l, abs(m))
    a, _, _ = _azimuthal(m, s[..., 0], s[..., 1])
    return _norm(l, m) * a * q(s[..., 2])


def tangent_basis(s):
    """East and north unit vectors at ``s``.

    Within ``POLE_TOL`` radians of a pole the east vector is taken from the
    0-degree meridian limit, so the frame is defined everywhere.
    """
    s = np.asarray(s, dtype=float)
    zhat = np.zeros_like(s)
    zhat[..., 2] = 1.0
    e = np.cross(zhat, s)
    en = np.linalg.norm(e, axis=-1, keepdims=True)
    near_pole = en[..., 0] < np.sin(POLE_TOL)
    if np.any(near_pole):
        yhat = np.zeros_like(s)
        yhat[..., 1] = 1.0
        fallback = yhat - np.sum(yhat * s, axis=-1, keepdims=True) * s
        e = np.where(near_pole[..., None], fallback, e)
        en = np.linalg.norm(e, axis=-1, keepdims=True)
    east = e / en
    north = np.cross(s, east)
    return east, north


def surf_gradient_Y(l: int, m: int, s) -> np.ndarray:
    """Surface gradient of ``Y_l^m`` in (east, north) components, shape (..., 2).

    The rotated field ``r x grad Y`` has components ``(-g_north, g_east)``.
    """
    if l < 1:
        raise InputError("surface gradient is only defined for l >= 1 in the vector-field basis")
    _check(l, m)
    s = np.asarray(s, dtype=float)
    g3 = _ambient_gradient(l, m, s)
    g3 = g3 - np.sum(g3 * s, axis=-1, keepdims=True) * s
    east, north = tangent_basis(s)
    return np.stack([np.sum(g3 * east, axis=-1), np.sum(g3 * north, axis=-1)], axis=-1)


def _ambient_gradient(l, m, s):
    q, dq = _legendre_deriv(l, abs(m))
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    a, ax, ay = _azimuthal(m, x, y)
    qz = q(z)
    c = _norm(l, m)
    return c * np.stack([ax * qz, ay * qz, a * dq(z)], axis=-1)


def harmonic_matrix(order: int, s) -> np.ndarray:
    """All ``Y_l^m`` for ``0 <= l <= order`` at points ``s``: shape (N, (order+1)^2)."""
    s = np.atleast_2d(s)
    return np.stack([real_sph_harmonic(l, m, s) for l, m in lm_pairs(order)], axis=-1)


def gradient_matrix(order: int, s):
    """Surface gradients of ``Y_l^m`` for ``1 <= l <= order``.

    Returns an array of shape (N, order^2 + 2 order, 2) in (east, north)
    components, computed with a single tangent frame per point.
    """
    s = np.atleast_2d(s)
    pairs = lm_pairs(order, start=1)
    if not pairs:
        return np.zeros((len(s), 0, 2))
    east, north = tangent_basis(s)
    g3 = np.stack([_ambient_gradient(l, m, s) for l, m in pairs], axis=1)  # (N, nb, 3)
    g3 = g3 - np.einsum("nbk,nk->nb", g3, s)[..., None] * s[:, None, :]
    return np.stack([np.einsum("nbk,nk->nb", g3, east), np.einsum("nbk,nk->nb", g3, north)], axis=-1)
