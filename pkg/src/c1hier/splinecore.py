"""
Univariate B-spline spaces on [0, 1] with uniform open knot vectors.

The module provides

- :class:`KnotBasis`, a vectorised Cox--de Boor evaluator for an arbitrary
  open knot vector,
- :class:`UnivariateSpace`, the validated space :math:`S_p^r` with ``k``
  uniformly spaced interior breakpoints, together with the two auxiliary
  spaces :math:`S_p^{r+1}` and :math:`S_{p-1}^r` on the same breakpoints,
- the modified endpoint bases used by the edge and vertex functions,
- knot-insertion refinement matrices computed by repeated Boehm insertion.

Points that coincide with a breakpoint are evaluated with the right limit,
except ``x = 1`` which uses the left limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class ParameterError(ValueError):
    """Invalid combination of degree, regularity and breakpoints."""


class DomainError(ValueError):
    """Evaluation point outside the parametric domain."""


def min_breaks(p: int, r: int) -> int:
    return max(0, math.ceil((5 - p) / (p - r - 1)))


def open_knots(degree: int, mult: int, k: int) -> np.ndarray:
    """Uniform open knot vector with ``k`` interior breaks of multiplicity ``mult``."""
    inner = np.repeat(np.arange(1, k + 1) / (k + 1), mult)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def knot_vector(p: int, r: int, k: int) -> np.ndarray:
    _check_params(p, r, k)
    return open_knots(p, p - r, k)


def _check_params(p, r, k):
    if p < 3:
        raise ParameterError(f"degree must be >= 3, got {p}")
    if not 1 <= r <= p - 2:
        raise ParameterError(f"regularity must satisfy 1 <= r <= p-2, got r={r}, p={p}")
    if k < min_breaks(p, r):
        raise ParameterError(
            f"k={k} below the minimal number of breaks {min_breaks(p, r)} for p={p}, r={r}")


@dataclass(frozen=True)
class SpanEval:
    """Nonzero basis values at one point.

    ``values[d, i]`` is the ``d``-th derivative of basis function ``first + i``.
    """
    first: int
    values: np.ndarray


class KnotBasis:
    """B-spline basis of a given degree over an open knot vector on [0, 1]."""

    def __init__(self, degree: int, knots):
        self.degree = int(degree)
        self.knots = np.asarray(knots, dtype=float)
        self.n = len(self.knots) - self.degree - 1
        self.breaks = np.unique(self.knots)
        self.nel = len(self.breaks) - 1

    def __repr__(self):
        return f"KnotBasis(degree={self.degree}, n={self.n}, nel={self.nel})"

    def spans(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(s, self.degree, self.n - 1)

    def element_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        e = np.searchsorted(self.breaks, x, side="right") - 1
        return np.clip(e, 0, self.nel - 1)

    def evaluate(self, x, nder: int = 0):
        """Vectorised evaluation.

        Returns ``(first, vals)`` with ``first`` of shape ``(m,)`` and ``vals``
        of shape ``(m, nder+1, degree+1)``.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any((x < -1e-14) | (x > 1 + 1e-14)):
            raise DomainError("evaluation point outside [0, 1]")
        x = np.clip(x, 0.0, 1.0)
        p, t = self.degree, self.knots
        m = len(x)
        span = self.spans(x)
        # ndu[:, j, i]: lower triangle holds knot differences, upper triangle
        # holds basis values of increasing degree (Piegl-Tiller A2.3)
        ndu = np.zeros((m, p + 1, p + 1))
        ndu[:, 0, 0] = 1.0
        left = np.zeros((m, p + 1))
        right = np.zeros((m, p + 1))
        for j in range(1, p + 1):
            left[:, j] = x - t[span + 1 - j]
            right[:, j] = t[span + j] - x
            saved = np.zeros(m)
            for r in range(j):
                ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
                tmp = ndu[:, r, j - 1] / ndu[:, j, r]
                ndu[:, r, j] = saved + right[:, r + 1] * tmp
                saved = left[:, j - r] * tmp
            ndu[:, j, j] = saved
        out = np.zeros((m, nder + 1, p + 1))
        out[:, 0, :] = ndu[:, :, p]
        if nder > 0:
            a = np.zeros((m, 2, p + 1))
            for r in range(p + 1):
                s1, s2 = 0, 1
                a[:, 0, :] = 0.0
                a[:, 0, 0] = 1.0
                for kk in range(1, nder + 1):
                    d = np.zeros(m)
                    rk, pk = r - kk, p - kk
                    a[:, s2, :] = 0.0
                    if r >= kk:
                        a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                        d = a[:, s2, 0] * ndu[:, rk, pk]
                    j1 = 1 if rk >= -1 else -rk
                    j2 = kk - 1 if r - 1 <= pk else p - r
                    for j in range(j1, j2 + 1):
                        a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                        d = d + a[:, s2, j] * ndu[:, rk + j, pk]
                    if r <= pk:
                        a[:, s2, kk] = -a[:, s1, kk - 1] / ndu[:, pk + 1, r]
                        d = d + a[:, s2, kk] * ndu[:, r, pk]
                    out[:, kk, r] = d
                    s1, s2 = s2, s1
            fac = float(p)
            for kk in range(1, nder + 1):
                out[:, kk, :] *= fac
                fac *= p - kk
        return span - p, out

    def dense(self, x, nder: int = 0) -> np.ndarray:
        """Full matrix of shape ``(nder+1, m, n)``."""
        first, vals = self.evaluate(x, nder)
        m = len(first)
        full = np.zeros((nder + 1, m, self.n))
        rows = np.repeat(np.arange(m), self.degree + 1)
        cols = (first[:, None] + np.arange(self.degree + 1)).ravel()
        for d in range(nder + 1):
            full[d, rows, cols] = vals[:, d, :].ravel()
        return full

    def support(self, j: int) -> tuple[int, int]:
        """Element index range ``[lo, hi]`` of the support of function ``j``."""
        lo = int(np.searchsorted(self.breaks, self.knots[j], side="left"))
        hi = int(np.searchsorted(self.breaks, self.knots[j + self.degree + 1], side="left")) - 1
        return lo, hi

    def functions_on(self, e: int) -> range:
        """Indices of the basis functions that do not vanish on element ``e``."""
        mid = 0.5 * (self.breaks[e] + self.breaks[e + 1])
        s = int(self.spans(mid))
        return range(s - self.degree, s + 1)

    def greville(self) -> np.ndarray:
        p = self.degree
        return np.array([self.knots[j + 1:j + p + 1].mean() for j in range(self.n)])


@dataclass(frozen=True)
class UnivariateSpace:
    """The space :math:`S_p^r` on [0, 1] with ``k`` uniform interior breaks."""

    p: int
    r: int
    k: int
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        _check_params(self.p, self.r, self.k)

    @property
    def n(self) -> int:
        return self.p + 1 + self.k * (self.p - self.r)

    @property
    def n0(self) -> int:
        return self.p + 1 + self.k * (self.p - self.r - 1)

    @property
    def n1(self) -> int:
        return self.p + self.k * (self.p - self.r - 1)

    @property
    def nel(self) -> int:
        return self.k + 1

    @property
    def h(self) -> float:
        return 1.0 / (self.k + 1)

    @property
    def knots(self) -> np.ndarray:
        return knot_vector(self.p, self.r, self.k)

    @cached_property
    def basis(self) -> KnotBasis:
        return KnotBasis(self.p, open_knots(self.p, self.p - self.r, self.k))

    @cached_property
    def basis_rp1(self) -> KnotBasis:
        return KnotBasis(self.p, open_knots(self.p, self.p - self.r - 1, self.k))

    @cached_property
    def basis_pm1(self) -> KnotBasis:
        return KnotBasis(self.p - 1, open_knots(self.p - 1, self.p - self.r - 1, self.k))

    def refined(self) -> "UnivariateSpace":
        return UnivariateSpace(self.p, self.r, 2 * self.k + 1)

    def family_basis(self, family: str) -> KnotBasis:
        return {"MP_r": self.basis, "MP_rp1": self.basis_rp1, "MPm1_r": self.basis_pm1}[family]


def eval_basis(space: UnivariateSpace, x: float, max_deriv: int = 0) -> SpanEval:
    if not 0 <= max_deriv <= 2:
        raise ValueError("max_deriv must be 0, 1 or 2")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x={x} outside [0, 1]")
    first, vals = space.basis.evaluate([x], max_deriv)
    return SpanEval(int(first[0]), vals[0])


def modified_coeffs(space: UnivariateSpace, family: str) -> np.ndarray:
    """Coefficients of the modified functions in the basis of ``family``.

    Row ``w`` holds the coefficients of the ``w``-th modified function over the
    leading basis functions of the underlying space, fixed by
    ``d^i M_w(0) = delta_iw``.
    """
    m = {"MP_r": 2, "MP_rp1": 3, "MPm1_r": 2}.get(family)
    if m is None:
        raise ValueError(f"unknown family {family!r}")
    basis = space.family_basis(family)
    # derivatives of the first m functions at 0 form an upper triangular matrix
    D = basis.dense([0.0], m - 1)[:, 0, :m]
    C = np.linalg.inv(D).T
    C[np.abs(C) < 1e-13 * np.abs(C).max()] = 0.0
    if m == 2:
        C = np.hstack([C, np.zeros((2, 1))])
    return C


def modified_basis(space: UnivariateSpace, family: str, x, max_deriv: int = 0) -> np.ndarray:
    """Values of the modified functions, shape ``(members, max_deriv+1)`` for scalar ``x``
    or ``(members, max_deriv+1, m)`` for an array."""
    basis = space.family_basis(family)
    coef = modified_coeffs(space, family)
    scalar = np.ndim(x) == 0
    full = basis.dense(np.atleast_1d(x), max_deriv)[:, :, :3]
    out = np.einsum("wj,dmj->wdm", coef, full)
    return out[:, :, 0] if scalar else out


def _insert_knot(knots: np.ndarray, coefs: np.ndarray, degree: int, u: float):
    s = int(np.searchsorted(knots, u, side="right")) - 1
    n = len(coefs)
    new = np.zeros(n + 1)
    for i in range(n + 1):
        if i <= s - degree:
            a = 1.0
        elif i >= s + 1:
            a = 0.0
        else:
            den = knots[i + degree] - knots[i]
            a = (u - knots[i]) / den if den > 0 else 0.0
        ci = coefs[i] if i < n else 0.0
        cm = coefs[i - 1] if i >= 1 else 0.0
        new[i] = a * ci + (1.0 - a) * cm
    return np.insert(knots, s + 1, u), new


def refine_row(coarse: KnotBasis, fine: KnotBasis, j: int) -> tuple[int, np.ndarray]:
    """Expansion of coarse function ``j`` over the fine basis by Boehm insertion.

    Returns ``(offset, coefs)`` with ``N_j = sum_i coefs[i] * M_{offset+i}``.
    """
    p = coarse.degree
    local = coarse.knots[j:j + p + 2].copy()
    a, b = local[0], local[-1]
    extra = _knot_difference(fine.knots, coarse.knots, a, b)
    coefs = np.array([1.0])
    for u in extra:
        local, coefs = _insert_knot(local, coefs, p, u)
    # align on the trailing copies of the first knot
    mult = int(np.searchsorted(coarse.knots, a, side="right")) - j
    return int(np.searchsorted(fine.knots, a, side="right")) - mult, coefs


def _knot_difference(fine_knots, coarse_knots, a, b):
    fv, fc = np.unique(fine_knots[(fine_knots > a) & (fine_knots < b)], return_counts=True)
    cv, cc = np.unique(coarse_knots[(coarse_knots > a) & (coarse_knots < b)], return_counts=True)
    cmap = dict(zip(np.round(cv, 14), cc))
    if not set(cmap) <= set(np.round(fv, 14)):
        raise ParameterError("fine knot vector does not contain the coarse one")
    out = []
    for v, c in zip(fv, fc):
        extra = c - cmap.get(round(float(v), 14), 0)
        if extra < 0:
            raise ParameterError("fine knot vector does not contain the coarse one")
        out.extend([float(v)] * int(extra))
    return out


def refine_matrix(coarse: KnotBasis, fine: KnotBasis) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for j in range(coarse.n):
        off, c = refine_row(coarse, fine, j)
        rows.extend([j] * len(c))
        cols.extend(range(off, off + len(c)))
        vals.extend(c)
    return sp.csr_matrix((vals, (rows, cols)), shape=(coarse.n, fine.n))


def dyadic_refine_matrix(space: UnivariateSpace) -> sp.csr_matrix:
    """Matrix Lambda with ``N_coarse = Lambda @ N_fine`` for the bisected space."""
    return refine_matrix(space.basis, space.refined().basis)
