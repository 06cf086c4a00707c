"""Gaussian derivative calculus and collision-count summation lemmas.

Everything revolves around one structural fact: every derivative of a centered
Gaussian density is a (tensor-valued) polynomial times the same Gaussian
factor, and that class is closed under differentiation in the spatial variable
*and* in the rescaling variable z of the kernel

    h_{a,g}(s, z) = z^g * Psi^{(a)}(0, ..., 0, s * sqrt(nutau / z)).

All derivatives used anywhere in the package are produced symbolically through
this closure; finite differences appear only in tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .symtensor import SymTensor, canonical_indices

__all__ = [
    "CovMatrix",
    "PolyGauss",
    "GaussLine",
    "psi",
    "psi_deriv",
    "char_fn",
    "char_fn_taylor",
    "h_eval",
    "h_dz",
    "h_moment_raw",
    "moment_integral",
    "euler_sum",
    "sumint",
    "SumIntResult",
    "NotSPDError",
    "QuadratureError",
]


class NotSPDError(ValueError):
    """Covariance input is not symmetric positive definite."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to converge to the requested tolerance."""


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric positive-definite covariance with cached inverse/determinant."""

    mat: np.ndarray
    inv: np.ndarray = field(init=False, repr=False)
    det: float = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NotSPDError("covariance must be a square matrix")
        if np.max(np.abs(m - m.T)) > 1e-12 * max(1.0, np.max(np.abs(m))):
            raise NotSPDError("covariance is not symmetric to 1e-12")
        m = (m + m.T) / 2.0
        eigs = np.linalg.eigvalsh(m)
        if eigs.min() <= 0:
            raise NotSPDError(f"covariance not positive definite (min eig {eigs.min():g})")
        object.__setattr__(self, "mat", m)
        object.__setattr__(self, "inv", np.linalg.inv(m))
        object.__setattr__(self, "det", float(np.linalg.det(m)))

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "CovMatrix":
        return cls(np.eye(dim))

    @classmethod
    def from_scalar(cls, var: float) -> "CovMatrix":
        return cls(np.array([[float(var)]]))


# -- multivariate scalar polynomials (internal) --------------------------------

class _MPoly:
    """Polynomial in D variables: exponent tuple -> complex coefficient."""

    __slots__ = ("dim", "c")

    def __init__(self, dim: int, c: dict | None = None):
        self.dim = dim
        self.c = c or {}

    @classmethod
    def const(cls, dim: int, value: complex) -> "_MPoly":
        return cls(dim, {(0,) * dim: complex(value)} if value != 0 else {})

    def axpy(self, alpha: complex, other: "_MPoly") -> "_MPoly":
        out = dict(self.c)
        for e, v in other.c.items():
            out[e] = out.get(e, 0j) + alpha * v
        return _MPoly(self.dim, {e: v for e, v in out.items() if v != 0})

    def diff(self, i: int) -> "_MPoly":
        out = {}
        for e, v in self.c.items():
            if e[i] > 0:
                e2 = e[:i] + (e[i] - 1,) + e[i + 1:]
                out[e2] = out.get(e2, 0j) + v * e[i]
        return _MPoly(self.dim, out)

    def mul_linear(self, a: np.ndarray) -> "_MPoly":
        """Multiply by the linear form a . s."""
        out = {}
        for e, v in self.c.items():
            for i in range(self.dim):
                if a[i] != 0:
                    e2 = e[:i] + (e[i] + 1,) + e[i + 1:]
                    out[e2] = out.get(e2, 0j) + v * a[i]
        return _MPoly(self.dim, out)

    def restrict_last(self) -> np.ndarray:
        """Coefficients (ascending powers) in the last variable with the rest at 0."""
        deg = 0
        for e in self.c:
            if all(x == 0 for x in e[:-1]):
                deg = max(deg, e[-1])
        out = np.zeros(deg + 1, dtype=complex)
        for e, v in self.c.items():
            if all(x == 0 for x in e[:-1]):
                out[e[-1]] += v
        return out

    def eval(self, s: np.ndarray) -> complex:
        acc = 0j
        for e, v in self.c.items():
            term = v
            for i, p in enumerate(e):
                if p:
                    term = term * s[i] ** p
            acc += term
        return acc


# -- tensor-valued polynomial x Gaussian over R^D -------------------------------

class PolyGauss:
    """S_m-valued function  s -> (poly_I(s))_I * exp(-1/2 s^T Sigma^{-1} s).

    The normalization constant of the density is folded into the polynomials,
    so ``PolyGauss.gaussian(cov)`` *is* the density and ``deriv`` produces its
    exact derivative tensors of any order.
    """

    def __init__(self, cov: CovMatrix, order: int, comp: dict):
        self.cov = cov
        self.order = order
        self.comp = comp  # canonical index tuple -> _MPoly

    @classmethod
    def gaussian(cls, cov: CovMatrix) -> "PolyGauss":
        d = cov.dim
        norm = (2 * math.pi) ** (-d / 2.0) / math.sqrt(cov.det)
        return cls(cov, 0, {(): _MPoly.const(d, norm)})

    def deriv(self) -> "PolyGauss":
        """One more derivative order: P e^{-q/2} -> (dP - P Sigma^{-1}s) e^{-q/2}.

        Because the underlying object is a derivative tensor of a scalar,
        mixed partials commute and any single slot may carry the new index;
        we peel the largest index of the canonical tuple.
        """
        d = self.cov.dim
        out = {}
        for key in canonical_indices(self.order + 1, d):
            j = key[-1]
            base = self.comp.get(key[:-1])
            if base is None:
                base = _MPoly(d)
            out[key] = base.diff(j).axpy(-1.0, base.mul_linear(self.cov.inv[j]))
        return PolyGauss(self.cov, self.order + 1, out)

    def eval(self, s) -> SymTensor:
        s = np.asarray(s, dtype=float)
        g = math.exp(-0.5 * float(s @ self.cov.inv @ s))
        coeffs = {}
        for key, p in self.comp.items():
            v = p.eval(s) * g
            if v != 0:
                coeffs[key] = v
        return SymTensor(self.order, self.cov.dim, coeffs)

    def line(self) -> "GaussLine":
        """Exact restriction to the last coordinate axis (others at 0),
        whitened so the Gaussian factor is standard in the stored variable."""
        c = float(self.cov.inv[-1, -1])
        ws = math.sqrt(c)
        comp = {}
        for key, p in self.comp.items():
            raw = p.restrict_last()
            comp[key] = raw * ws ** (-np.arange(len(raw), dtype=float))
        return GaussLine(self.cov.dim, self.order, c, comp, ws)


@lru_cache(maxsize=256)
def _psi_chain(cov_key, order: int):
    cov, chain = cov_key.cov, [None] * (order + 1)
    pg = PolyGauss.gaussian(cov)
    chain[0] = pg
    for k in range(1, order + 1):
        pg = pg.deriv()
        chain[k] = pg
    return chain


class _CovKey:
    """Hashable wrapper so derivative chains can be cached per covariance."""

    def __init__(self, cov: CovMatrix):
        self.cov = cov
        self._key = (cov.dim,) + tuple(np.round(cov.mat, 15).ravel())

    def __hash__(self):
        return hash(self._key)

    def __eq__(self, other):
        return isinstance(other, _CovKey) and self._key == other._key


def _psi_pg(cov: CovMatrix, order: int) -> PolyGauss:
    return _psi_chain(_CovKey(cov), order)[order]


# -- tensor-valued polynomial x Gaussian of one variable ------------------------

class GaussLine:
    """S_m-valued function  u -> (p_I(u))_I * exp(-c u^2 / 2)  on the real line.

    Coefficients are stored against the whitened variable w = u * w_scale
    (with w_scale = sqrt(c) the Gaussian becomes standard), which keeps the
    polynomial magnitudes Hermite-like instead of carrying powers of c; that
    matters for steep conditional variances.
    """

    def __init__(self, dim: int, order: int, c: float, comp: dict,
                 w_scale: float = 1.0):
        self.dim = dim
        self.order = order
        self.c = float(c)
        self.w_scale = float(w_scale)
        self.comp = comp  # canonical index -> ascending coefficients in w

    def d_du(self) -> "GaussLine":
        ws = self.w_scale
        ratio = self.c / ws
        out = {}
        for key, p in self.comp.items():
            dp = np.arange(1, len(p)) * p[1:] if len(p) > 1 else np.zeros(0, dtype=complex)
            shifted = np.concatenate(([0.0 + 0j], -ratio * p))
            n = max(len(dp), len(shifted))
            q = np.zeros(n, dtype=complex)
            q[: len(dp)] += ws * dp
            q[: len(shifted)] += shifted
            out[key] = q
        return GaussLine(self.dim, self.order, self.c, out, ws)

    def scale(self, alpha: complex) -> "GaussLine":
        return GaussLine(self.dim, self.order, self.c,
                         {k: alpha * p for k, p in self.comp.items()}, self.w_scale)

    def axpy(self, alpha: complex, other: "GaussLine") -> "GaussLine":
        if abs(other.w_scale - self.w_scale) > 1e-14 * self.w_scale:
            raise ValueError("mixing incompatible line representations")
        out = {}
        keys = set(self.comp) | set(other.comp)
        for k in keys:
            a = self.comp.get(k, np.zeros(1, dtype=complex))
            b = other.comp.get(k, np.zeros(1, dtype=complex))
            n = max(len(a), len(b))
            q = np.zeros(n, dtype=complex)
            q[: len(a)] += a
            q[: len(b)] += alpha * b
            out[k] = q
        return GaussLine(self.dim, self.order, self.c, out, self.w_scale)

    def mul_u(self) -> "GaussLine":
        inv = 1.0 / self.w_scale
        return GaussLine(self.dim, self.order, self.c,
                         {k: np.concatenate(([0j], inv * p))
                          for k, p in self.comp.items()}, self.w_scale)

    def degree(self) -> int:
        return max((len(p) - 1 for p in self.comp.values()), default=0)

    def eval(self, u: float) -> SymTensor:
        g = math.exp(-0.5 * self.c * u * u)
        w = u * self.w_scale
        coeffs = {}
        for key, p in self.comp.items():
            v = _polyval(p, w) * g
            if v != 0:
                coeffs[key] = v
        return SymTensor(self.order, self.dim, coeffs)

    def eval_many(self, us: np.ndarray) -> dict:
        """Vectorized evaluation: canonical index -> array of values."""
        us = np.asarray(us, dtype=float)
        g = np.exp(-0.5 * self.c * us * us)
        ws = us * self.w_scale
        return {key: _polyval(p, ws) * g for key, p in self.comp.items()}

    def moments_closed_form(self, extra_power: int = 0) -> SymTensor:
        """Exact integral of u^extra_power * self over the real line.

        Uses the classical even Gaussian moments; serves as an internal
        cross-check for the quadrature path, not as its replacement.
        """
        cw = self.c / self.w_scale ** 2
        out = {}
        for key, p in self.comp.items():
            acc = 0j
            for j, coef in enumerate(p):
                n = j + extra_power
                if coef != 0 and n % 2 == 0:
                    acc += coef * _gauss_moment(n, cw) \
                        * self.w_scale ** (-extra_power - 1)
            if acc != 0:
                out[key] = acc
        return SymTensor(self.order, self.dim, out)


def _polyval(p: np.ndarray, x):
    acc = np.zeros_like(np.asarray(x, dtype=complex)) if np.ndim(x) else 0j
    for coef in p[::-1]:
        acc = acc * x + coef
    return acc


def _gauss_moment(n: int, c: float) -> float:
    """integral of u^n exp(-c u^2/2) du for even n."""
    val = math.sqrt(2 * math.pi / c)
    for k in range(1, n // 2 + 1):
        val *= (2 * k - 1) / c
    return val


# -- public Gaussian operations --------------------------------------------------

def psi(cov: CovMatrix, s) -> float:
    """Centered Gaussian density at s."""
    s = np.asarray(s, dtype=float)
    if s.shape[0] != cov.dim:
        raise ValueError(f"point dim {s.shape[0]} != covariance dim {cov.dim}")
    q = float(s @ cov.inv @ s)
    return math.exp(-0.5 * q) / ((2 * math.pi) ** (cov.dim / 2.0) * math.sqrt(cov.det))


def psi_deriv(cov: CovMatrix, k: int, s) -> SymTensor:
    """Order-k derivative tensor of the density at s, computed symbolically."""
    if k < 0:
        raise ValueError("derivative order must be non-negative")
    return _psi_pg(cov, k).eval(np.asarray(s, dtype=float))


def char_fn(cov: CovMatrix, s) -> float:
    """Fourier transform of the density: exp(-1/2 Sigma * s^{x2})."""
    s = np.asarray(s, dtype=float)
    return math.exp(-0.5 * float(s @ cov.mat @ s))


def char_fn_taylor(cov, order: int) -> list:
    """Taylor *coefficient* tensors of the characteristic function at 0.

    Only even orders are non-zero: c_{2k} = (-Sigma/2)^{xk} / k!.  Accepts a
    ``CovMatrix`` or a plain symmetric array (which may be semidefinite).
    """
    from .symtensor import sym_outer
    mat = cov.mat if isinstance(cov, CovMatrix) else np.asarray(cov, dtype=float)
    dim = mat.shape[0]
    half = SymTensor.from_matrix(-0.5 * mat)
    out = [SymTensor.zero(m, dim) for m in range(order + 1)]
    out[0] = SymTensor.scalar(1.0, dim)
    power = SymTensor.scalar(1.0, dim)
    for k in range(1, order // 2 + 1):
        power = sym_outer(power, half)
        out[2 * k] = power * (1.0 / math.factorial(k))
    return out


# -- the rescaled kernel h and its z-derivatives ---------------------------------

def _psi_line(cov: CovMatrix, alpha: int) -> GaussLine:
    return _psi_pg(cov, alpha).line()


def _h_dz_line(cov: CovMatrix, alpha: int, gamma: float, q: int) -> GaussLine:
    """H_q with  d_z^q h_{alpha,gamma}(s, z)|_{z=1} = H_q(s sqrt(nutau)).

    One z-derivative maps z^g G(u) to z^{g-1} (g G - u G'/2) with
    u = s sqrt(nutau/z); iterating keeps the poly x Gaussian form.
    """
    H = _psi_line(cov, alpha)
    for step in range(q):
        H = H.scale(gamma - step).axpy(-0.5, H.d_du().mul_u())
    return H


def h_eval(alpha: int, gamma: float, s: float, z: float, cov: CovMatrix,
           nutau: float) -> SymTensor:
    """z^gamma * Psi^{(alpha)} at the point (0,...,0, s / sqrt(z/nutau))."""
    if z <= 0:
        raise ValueError("z must be positive")
    if nutau <= 0:
        raise ValueError("nutau must be positive")
    u = s * math.sqrt(nutau / z)
    return _psi_line(cov, alpha).eval(u) * (z ** gamma)


def h_dz(alpha: int, gamma: float, q: int, s: float, cov: CovMatrix,
         nutau: float) -> SymTensor:
    """q-th derivative in the rescaling variable, at z = 1, evaluated at s."""
    if q < 0:
        raise ValueError("q must be non-negative")
    return _h_dz_line(cov, alpha, gamma, q).eval(s * math.sqrt(nutau))


# -- moment integrals -------------------------------------------------------------

def _adaptive_gl(fvec, lo: float, hi: float, rtol: float = 1e-13,
                 max_level: int = 11):
    """Adaptive panelized Gauss-Legendre on [lo, hi] for vector integrands.

    ``fvec(x)`` maps an array of nodes to an array (..., len(x)).  Panels are
    doubled until two consecutive levels agree to rtol, with a floor tied to
    the L1 mass of the integrand (rounding noise of large oscillating values
    cannot shrink below that).  Deterministic: fixed node order, fixed
    summation order.
    """
    nodes, weights = np.polynomial.legendre.leggauss(24)
    prev = None
    npanels = 8
    for _ in range(max_level):
        edges = np.linspace(lo, hi, npanels + 1)
        mid = (edges[:-1] + edges[1:]) / 2.0
        half = (edges[1:] - edges[:-1]) / 2.0
        xs = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        ws = (half[:, None] * weights[None, :]).ravel()
        vals = fvec(xs)
        total = vals @ ws
        if prev is not None:
            err = np.max(np.abs(total - prev))
            l1 = float(np.max(np.abs(vals) @ np.abs(ws)))
            if err <= max(rtol * max(1.0, float(np.max(np.abs(total)))),
                          1e-13 * l1):
                return total
        prev = total
        npanels *= 2
    raise QuadratureError(
        f"Gauss-Legendre refinement did not converge on [{lo}, {hi}]")


def _check_component_parity(H: GaussLine, alpha: int):
    """The kernel components carry the parity of the derivative order; the
    polynomial slots of the opposite parity must be exactly empty."""
    for key, p in H.comp.items():
        for j, coef in enumerate(p):
            if coef != 0 and (j - alpha) % 2 != 0:
                raise QuadratureError(
                    f"kernel component {key} violates its parity structure")


def h_moment_raw(alpha: int, gamma: float, q: int, cov: CovMatrix,
                 nutau: float) -> SymTensor:
    """integral over s of  d_z^q h_{alpha,gamma}(s,1) (-s)^q  as an S_alpha tensor.

    The integrand components all have parity alpha + q (verified from the
    polynomial slots), so odd signatures integrate to exactly zero and even
    ones reduce to twice the half line.  The integration interval follows the
    Gaussian factor: decay exp(-c nutau s^2/2) puts the tail below 1e-14 of
    scale at S = (12 + degree + q) * sigma.
    """
    H = _h_dz_line(cov, alpha, gamma, q)
    _check_component_parity(H, alpha)
    if (alpha + q) % 2 == 1:
        return SymTensor.zero(alpha, cov.dim)
    root = math.sqrt(nutau)
    sigma = 1.0 / math.sqrt(H.c * nutau)
    S = (12.0 + H.degree() + q) * sigma
    keys = sorted(H.comp.keys())

    def fvec(xs):
        vals = H.eval_many(xs * root)
        sign = (-xs) ** q
        return np.array([vals[k] * sign for k in keys])

    totals = 2.0 * _adaptive_gl(fvec, 0.0, S)
    coeffs = {k: totals[i] for i, k in enumerate(keys) if totals[i] != 0}
    return SymTensor(alpha, cov.dim, coeffs)


def h_moment_pair(alpha: int, gamma: float, q: int, cov: CovMatrix,
                  nutau: float) -> tuple:
    """Both moment normalizations plus the L1 mass of the integrand.

    The two normalizations are analytically identical; in floating point each
    component can only be resolved down to eps times its cancellation mass,
    so the returned L1 tensor is the right yardstick for asserting equality.
    """
    canon = moment_integral(alpha, gamma, q, cov, nutau, mode="canonical")
    other = moment_integral(alpha, gamma, q, cov, nutau, mode="rescaled-argument")
    H = _h_dz_line(cov, alpha, gamma, q)
    if (alpha + q) % 2 == 1:
        return canon, other, SymTensor.zero(alpha, cov.dim)
    root = math.sqrt(nutau)
    sigma = 1.0 / math.sqrt(H.c * nutau)
    S = (12.0 + H.degree() + q) * sigma
    keys = sorted(H.comp.keys())

    def fabs(xs):
        vals = H.eval_many(xs * root)
        sign = np.abs(xs) ** q
        return np.array([np.abs(vals[k]) * sign for k in keys])

    totals = 2.0 * _adaptive_gl(fabs, 0.0, S, rtol=1e-6) \
        * (nutau ** (-(q + 1) / 2.0))
    l1 = SymTensor(alpha, cov.dim,
                   {k: totals[i] for i, k in enumerate(keys) if totals[i] != 0})
    return canon, other, l1


def moment_integral(alpha: int, gamma: float, q: int, cov: CovMatrix,
                    nutau: float, mode: str = "canonical") -> SymTensor:
    """Coefficient-factor moment integral, in either normalization.

    ``canonical``: nutau^{-(q+1)/2} * integral d_z^q h(s,1) (-s)^q ds.
    ``rescaled-argument``: integral d_z^q h(s sqrt(nutau), 1) (-s)^q ds.
    A change of variables shows the two must agree; tests assert it.
    """
    if mode == "canonical":
        return h_moment_raw(alpha, gamma, q, cov, nutau) * (nutau ** (-(q + 1) / 2.0))
    if mode == "rescaled-argument":
        H = _h_dz_line(cov, alpha, gamma, q)
        _check_component_parity(H, alpha)
        if (alpha + q) % 2 == 1:
            return SymTensor.zero(alpha, cov.dim)
        sigma = 1.0 / (math.sqrt(H.c) * nutau)
        S = (12.0 + H.degree() + q) * sigma
        keys = sorted(H.comp.keys())

        def fvec(xs):
            vals = H.eval_many(xs * nutau)
            sign = (-xs) ** q
            return np.array([vals[k] * sign for k in keys])

        totals = 2.0 * _adaptive_gl(fvec, 0.0, S)
        coeffs = {k: totals[i] for i, k in enumerate(keys) if totals[i] != 0}
        return SymTensor(alpha, cov.dim, coeffs)
    raise ValueError(f"unknown mode {mode!r}")


# -- summation lemmas --------------------------------------------------------------

def euler_sum(H, t: float, eta: float, tail_tol: float = 1e-16,
              max_terms: int = 10 ** 7) -> float:
    """eta * sum_k H(t + k eta), truncated where |H| stays below tail_tol.

    For H with L continuous derivatives of rapid decay the difference from
    the integral of H is O(eta^L).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    k0 = int(round(-t / eta))
    total = 0.0
    block = 512
    for direction in (1, -1):
        start = k0 if direction == 1 else k0 - 1
        quiet = 0
        k = start
        steps = 0
        while quiet < 4 and steps < max_terms:
            ks = k + direction * np.arange(block)
            vals = np.asarray(H(t + ks * eta), dtype=float)
            total += float(np.sum(vals))
            if np.max(np.abs(vals)) < tail_tol:
                quiet += 1
            else:
                quiet = 0
            k += direction * block
            steps += block
    return eta * total


@dataclass
class SumIntResult:
    """Both sides of the collision-count summation identity."""

    direct: SymTensor
    expansion: SymTensor
    t_minus: int
    t_plus: int

    def diff_norm(self) -> float:
        return (self.direct - self.expansion).norm_inf()


def sumint(alpha: int, gamma: float, Q: int, t: float, nutau: float,
           cov: CovMatrix, tau_bounds: tuple | None = None) -> SumIntResult:
    """Direct lattice sum of rescaled Gaussian derivatives vs. its expansion.

    direct     = sum_{n=t-}^{t+} n^gamma Psi^{(alpha)}(0, (t - n nutau)/sqrt(n))
    expansion  = (t/nutau)^gamma * sum_{q<=Q} (1/q!) t^{-(q-1)/2} / nutau
                 * integral d_z^q h_{alpha,gamma}(s,1) (-s)^q ds
    """
    if tau_bounds is None:
        tau_bounds = (0.8 * nutau, 1.25 * nutau)
    inf_tau, sup_tau = tau_bounds
    t_minus = max(1, math.ceil(t / sup_tau) - 2)
    t_plus = math.floor(t / inf_tau) + 2

    ns = np.arange(t_minus, t_plus + 1, dtype=float)
    us = (t - ns * nutau) / np.sqrt(ns)
    line = _psi_line(cov, alpha)
    vals = line.eval_many(us)
    weights = ns ** gamma
    direct = SymTensor(alpha, cov.dim,
                       {k: complex(np.sum(v * weights)) for k, v in vals.items()})

    expansion = SymTensor.zero(alpha, cov.dim)
    for q in range(Q + 1):
        Mq = h_moment_raw(alpha, gamma, q, cov, nutau)
        factor = (t ** (-(q - 1) / 2.0)) / (nutau * math.factorial(q))
        expansion = expansion + Mq * factor
    expansion = expansion * ((t / nutau) ** gamma)
    return SumIntResult(direct, expansion, t_minus, t_plus)
