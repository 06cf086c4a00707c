"""Exact piecewise-polynomial functions of one real variable.

Fiber profiles, smoothing windows and their calculus (products, derivatives,
moments, Fourier transforms) are all piecewise polynomials here, so every
integral the oracles need has a closed form.  Each piece stores coefficients
in the local variable y = s - x_i (ascending powers), which keeps Taylor
shifts and evaluation well conditioned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["PiecewisePoly", "smooth_bump", "smooth_step", "apply_window"]


def _poly_shift(c: np.ndarray, delta: float) -> np.ndarray:
    """Re-expand sum c_j y^j around y = delta (Taylor shift)."""
    n = len(c)
    out = np.zeros(n, dtype=c.dtype)
    for j, cj in enumerate(c):
        if cj == 0:
            continue
        for a in range(j + 1):
            out[a] += cj * math.comb(j, a) * delta ** (j - a)
    return out


def _poly_eval(c: np.ndarray, y):
    acc = np.zeros_like(np.asarray(y, dtype=complex)) if np.ndim(y) else 0j
    for coef in c[::-1]:
        acc = acc * y + coef
    return acc


@dataclass
class PiecewisePoly:
    """Compactly supported piecewise polynomial.

    ``breaks`` has k+1 ascending entries; ``pieces[i]`` holds ascending local
    coefficients on [breaks[i], breaks[i+1]).  The function vanishes outside
    [breaks[0], breaks[-1]].
    """

    breaks: np.ndarray
    pieces: list

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, dtype=float)
        if len(self.breaks) != len(self.pieces) + 1:
            raise ValueError("need exactly one more breakpoint than pieces")
        if np.any(np.diff(self.breaks) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        self.pieces = [np.asarray(p, dtype=float) for p in self.pieces]

    # -- basic queries --------------------------------------------------------

    @property
    def support(self) -> tuple:
        return float(self.breaks[0]), float(self.breaks[-1])

    def degree(self) -> int:
        return max((len(p) - 1 for p in self.pieces), default=0)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        out = np.zeros_like(s)
        idx = np.searchsorted(self.breaks, s, side="right") - 1
        inside = (idx >= 0) & (idx < len(self.pieces))
        # right endpoint belongs to the support (limit value of last piece)
        at_end = s == self.breaks[-1]
        idx = np.where(at_end, len(self.pieces) - 1, idx)
        inside |= at_end
        for i in range(len(self.pieces)):
            m = inside & (idx == i)
            if np.any(m):
                out[m] = _poly_eval(self.pieces[i], s[m] - self.breaks[i]).real
        return float(out[0]) if scalar else out

    def is_continuous(self, tol: float = 1e-12) -> bool:
        """True when pieces match at interior breakpoints and support ends."""
        scale = max(1.0, max((np.max(np.abs(p)) for p in self.pieces), default=0.0))
        vals = [abs(self.pieces[0][0] if len(self.pieces[0]) else 0.0)]
        for i in range(len(self.pieces) - 1):
            h = self.breaks[i + 1] - self.breaks[i]
            left = _poly_eval(self.pieces[i], h).real
            right = self.pieces[i + 1][0] if len(self.pieces[i + 1]) else 0.0
            vals.append(abs(left - right))
        h = self.breaks[-1] - self.breaks[-2]
        vals.append(abs(_poly_eval(self.pieces[-1], h).real))
        return max(vals) <= tol * scale

    # -- algebra ---------------------------------------------------------------

    def scale(self, alpha: float) -> "PiecewisePoly":
        return PiecewisePoly(self.breaks.copy(), [alpha * p for p in self.pieces])

    def shift(self, c: float) -> "PiecewisePoly":
        """Translate the support: new(s) = old(s - c)."""
        return PiecewisePoly(self.breaks + c, [p.copy() for p in self.pieces])

    def derivative(self) -> "PiecewisePoly":
        out = []
        for p in self.pieces:
            out.append(np.arange(1, len(p)) * p[1:] if len(p) > 1
                       else np.zeros(1))
        return PiecewisePoly(self.breaks.copy(), out)

    def __add__(self, other: "PiecewisePoly") -> "PiecewisePoly":
        return _combine(self, other, lambda a, b: _padded(a, b, 1.0))

    def product(self, other: "PiecewisePoly") -> "PiecewisePoly":
        """Pointwise product; vanishes where either factor does."""
        lo = max(self.breaks[0], other.breaks[0])
        hi = min(self.breaks[-1], other.breaks[-1])
        if lo >= hi:
            mid = 0.5 * (self.breaks[0] + self.breaks[-1])
            return PiecewisePoly([mid, mid + 1.0], [np.zeros(1)])
        breaks = np.unique(np.concatenate([
            self.breaks[(self.breaks >= lo) & (self.breaks <= hi)],
            other.breaks[(other.breaks >= lo) & (other.breaks <= hi)],
            [lo, hi]]))
        pieces = []
        for i in range(len(breaks) - 1):
            x = breaks[i]
            a = self._local_at(x)
            b = other._local_at(x)
            pieces.append(np.convolve(a, b) if len(a) and len(b) else np.zeros(1))
        return PiecewisePoly(breaks, pieces)

    def _local_at(self, x: float) -> np.ndarray:
        """Local coefficients of the piece containing x, re-expanded at x."""
        i = int(np.searchsorted(self.breaks, x, side="right")) - 1
        if i < 0 or i >= len(self.pieces):
            return np.zeros(1)
        return _poly_shift(self.pieces[i], x - self.breaks[i])

    # -- integrals ---------------------------------------------------------------

    def integral(self, a: float | None = None, b: float | None = None) -> float:
        lo, hi = self.support
        a = lo if a is None else max(a, lo)
        b = hi if b is None else min(b, hi)
        if a >= b:
            return 0.0
        total = 0.0
        for i, p in enumerate(self.pieces):
            x0, x1 = self.breaks[i], self.breaks[i + 1]
            u, v = max(a, x0), min(b, x1)
            if u >= v:
                continue
            anti = p / np.arange(1, len(p) + 1)
            total += (_poly_eval(anti, v - x0) * (v - x0)
                      - _poly_eval(anti, u - x0) * (u - x0)).real
        return total

    def moment(self, e: int) -> float:
        """integral of s^e * self(s) ds, exact."""
        total = 0.0
        for i, p in enumerate(self.pieces):
            x0 = self.breaks[i]
            h = self.breaks[i + 1] - x0
            for j, cj in enumerate(p):
                if cj == 0:
                    continue
                for a in range(e + 1):
                    total += (cj * math.comb(e, a) * x0 ** (e - a)
                              * h ** (a + j + 1) / (a + j + 1))
        return total

    def fourier(self, xi) -> np.ndarray:
        """integral e^{i xi s} self(s) ds, exact and vectorized over xi."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        out = np.zeros(xi.shape, dtype=complex)
        deg = self.degree()
        for i, p in enumerate(self.pieces):
            x0 = self.breaks[i]
            h = self.breaks[i + 1] - x0
            tbl = _int_pow_exp_table(deg, h, xi)
            local = np.zeros(xi.shape, dtype=complex)
            for j, cj in enumerate(p):
                if cj != 0:
                    local += cj * tbl[j]
            out += np.exp(1j * xi * x0) * local
        return out

    def sup_norm_bound(self, n: int = 512) -> float:
        lo, hi = self.support
        xs = np.linspace(lo, hi, n)
        return float(np.max(np.abs(self(xs))))

    def overlap_integral(self, other: "PiecewisePoly", shift: float = 0.0) -> float:
        """integral self(s) * other(s + shift) ds, exact.

        Gauss-Legendre of sufficient order on each subinterval of the merged
        breakpoint grid; pure pointwise evaluation, so it avoids the
        re-expansion cancellation that coefficient-level products suffer at
        high degree.
        """
        lo = max(self.breaks[0], other.breaks[0] - shift)
        hi = min(self.breaks[-1], other.breaks[-1] - shift)
        if lo >= hi:
            return 0.0
        cuts = np.unique(np.concatenate([
            self.breaks[(self.breaks > lo) & (self.breaks < hi)],
            (other.breaks - shift)[(other.breaks - shift > lo)
                                   & (other.breaks - shift < hi)],
            [lo, hi]]))
        npts = (self.degree() + other.degree()) // 2 + 2
        gx, gw = np.polynomial.legendre.leggauss(npts)
        total = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            mid, half = (a + b) / 2.0, (b - a) / 2.0
            xs = mid + half * gx
            total += half * float(np.sum(gw * self(xs) * other(xs + shift)))
        return total

    def trimmed(self) -> "PiecewisePoly":
        """Drop exactly-zero pieces at either end of the support."""
        lo, hi = 0, len(self.pieces)
        while lo < hi and not np.any(self.pieces[lo]):
            lo += 1
        while hi > lo and not np.any(self.pieces[hi - 1]):
            hi -= 1
        if lo == hi:
            mid = float(self.breaks[0])
            return PiecewisePoly([mid, mid + 1.0], [np.zeros(1)])
        return PiecewisePoly(self.breaks[lo:hi + 1],
                             [p.copy() for p in self.pieces[lo:hi]])


def _padded(a: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[: len(a)] += a
    out[: len(b)] += beta * b
    return out


def _combine(f: PiecewisePoly, g: PiecewisePoly, op) -> PiecewisePoly:
    breaks = np.unique(np.concatenate([f.breaks, g.breaks]))
    pieces = []
    for i in range(len(breaks) - 1):
        x = breaks[i]
        pieces.append(op(f._local_at(x), g._local_at(x)))
    return PiecewisePoly(breaks, pieces)


def _int_pow_exp_table(jmax: int, h: float, xi: np.ndarray) -> list:
    """I_j(xi) = integral_0^h y^j e^{i xi y} dy for j = 0..jmax, vectorized.

    Works with the unit-interval moments J_j(z) = integral_0^1 u^j e^{izu} du
    at z = xi h, so I_j = h^{j+1} J_j.  Upward recursion is stable once |z|
    exceeds the degree; below that the inhomogeneous recursion is iterated
    downward from a high order, where start-up error damps by |z|/j per step.
    Both branches avoid the catastrophic power-series cancellation that high
    degrees would otherwise hit at moderate |z|.
    """
    z = xi * h
    J = np.zeros((jmax + 1, xi.shape[0]), dtype=complex)

    tiny = np.abs(z) < 1e-9
    if np.any(tiny):
        zt = z[tiny]
        for j in range(jmax + 1):
            # two-term expansion suffices below 1e-9
            J[j, tiny] = 1.0 / (j + 1) + 1j * zt / (j + 2)

    up = (~tiny) & (np.abs(z) >= jmax + 1)
    if np.any(up):
        zu = z[up]
        iz = 1j * zu
        e = np.exp(iz)
        cur = (e - 1.0) / iz
        J[0, up] = cur
        for j in range(1, jmax + 1):
            cur = (e - j * cur) / iz
            J[j, up] = cur

    down = (~tiny) & (~up)
    if np.any(down):
        zd = z[down]
        iz = 1j * zd
        e = np.exp(iz)
        jtop = jmax + 36 + int(math.ceil(np.max(np.abs(zd))))
        cur = np.zeros(zd.shape, dtype=complex)
        for j in range(jtop, 0, -1):
            cur = (e - iz * cur) / j  # J_{j-1} from J_j
            if j - 1 <= jmax:
                J[j - 1, down] = cur

    return [J[j] * h ** (j + 1) for j in range(jmax + 1)]


# -- standard profiles -----------------------------------------------------------

def smooth_bump(a: float, b: float, k: int = 4, mass: float | None = None,
                amplitude: float | None = None) -> PiecewisePoly:
    """Polynomial bump (s-a)^k (b-s)^k on [a, b]: C^{k-1} at the endpoints.

    Exactly one of ``mass`` (integral) or ``amplitude`` (peak value) may pin
    the scale; default is unit peak amplitude.
    """
    if b <= a:
        raise ValueError("need a < b")
    if k < 1:
        raise ValueError("need k >= 1")
    h = b - a
    # (y)^k (h - y)^k in ascending local powers
    coeff = np.zeros(2 * k + 1)
    for m in range(k + 1):
        coeff[k + m] = math.comb(k, m) * (-1.0) ** m * h ** (k - m)
    profile = PiecewisePoly([a, b], [coeff])
    if mass is not None and amplitude is not None:
        raise ValueError("give at most one of mass/amplitude")
    if mass is not None:
        return profile.scale(mass / profile.integral())
    peak = (h / 2.0) ** (2 * k)
    return profile.scale((1.0 if amplitude is None else amplitude) / peak)


def _rise_coeffs(lo: float, hi: float, k: int) -> np.ndarray:
    """Local coefficients (in y = s - lo) of the monotone C^{k-1} spline that
    rises 0 -> 1 across [lo, hi]: the normalized antiderivative of a bump."""
    bump = smooth_bump(lo, hi, k, mass=1.0)
    p = bump.pieces[0]
    return np.concatenate(([0.0], p / np.arange(1, len(p) + 1)))


def smooth_step(s, lo: float, hi: float, k: int = 4):
    """Evaluate the monotone window: 0 below lo, 1 above hi, C^{k-1} spline
    in between."""
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    out = np.ones_like(s)
    out[s <= lo] = 0.0
    mid = (s > lo) & (s < hi)
    if np.any(mid):
        out[mid] = _poly_eval(_rise_coeffs(lo, hi, k), s[mid] - lo).real
    return float(out[0]) if scalar else out


def apply_window(pp: PiecewisePoly, lo: float, hi: float, k: int = 4,
                 direction: str = "rise") -> PiecewisePoly:
    """Exact product of a piecewise polynomial with the smooth window.

    direction 'rise': multiply by the 0 -> 1 window on [lo, hi];
    direction 'fall': multiply by its complement (1 -> 0).
    """
    if direction not in ("rise", "fall"):
        raise ValueError("direction must be 'rise' or 'fall'")
    rise = _rise_coeffs(lo, hi, k)
    if direction == "fall":
        rise = -rise
        rise[0] += 1.0
    a0, b0 = pp.support
    cut = [x for x in (lo, hi) if a0 < x < b0]
    breaks = np.unique(np.concatenate([pp.breaks, np.asarray(cut)]))
    pieces = []
    for i in range(len(breaks) - 1):
        x = breaks[i]
        local = pp._local_at(x)
        if x >= hi - 1e-300:
            w = np.array([1.0]) if direction == "rise" else np.array([0.0])
        elif x < lo:
            w = np.array([0.0]) if direction == "rise" else np.array([1.0])
        else:
            w = _poly_shift(rise, x - lo)
        pieces.append(np.convolve(local, w) if len(local) and len(w) else np.zeros(1))
    return PiecewisePoly(breaks, pieces).trimmed()
