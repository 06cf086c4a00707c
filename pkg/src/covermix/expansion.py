"""Decay-coefficient engine for the correlation expansion.

From the spectral jet of a model this module extracts the non-Gaussian
correction tables (coefficients of the polynomial-in-n deviation of the
normalized eigenvalue power from its Gaussian envelope) and assembles the
expansion coefficients of the correlation function in inverse powers of time.
Every admissible index tuple is evaluated exactly -- projector bilinear forms
from the jets, lattice/fiber geometry from closed-form profile moments,
moment integrals from the Gaussian kernel calculus -- and recorded in a term
ledger for audit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gauss import CovMatrix, char_fn_taylor, h_moment_pair, moment_integral
from .jets import SpectralJet, bm_form, clt_matrix
from .markov import MarkovModel, Observable, twisted
from .symtensor import SymTensor, contract, sym_outer, vec_power

__all__ = [
    "AjkTable",
    "ExpansionCoefficients",
    "NumericsError",
    "zeta_jet",
    "zeta_taylor",
    "ajk_table",
    "poly_remainder_check",
    "coefficients",
    "predict",
]


class NumericsError(RuntimeError):
    """A linear-algebra step failed its residual guard."""


# -- normalized eigenvalue over Gaussian envelope ----------------------------------

def zeta_taylor(jet: SpectralJet, order: int) -> list:
    """Taylor coefficient tensors of the ratio (recentered eigenvalue)/(Gaussian).

    Power-series division order by order; the first J-1 coefficients vanish
    by construction of the matching covariance.
    """
    if order > jet.L:
        raise ValueError("requested order exceeds the jet order")
    D = jet.dim
    lamt = [SymTensor(m, D, {k: complex(v) for k, v in jet.lambda_tilde_taylor()[m].items()})
            for m in range(order + 1)]
    ac = char_fn_taylor(jet.sigma, order)
    zc = [SymTensor.scalar(1.0, D)]
    for m in range(1, order + 1):
        acc = lamt[m]
        for a in range(0, m):
            acc = acc - sym_outer(zc[a], ac[m - a])
        zc.append(acc)
    return zc


def zeta_jet(jet: SpectralJet, order: int) -> list:
    """Derivative tensors of the normalized eigenvalue ratio at zero twist."""
    return [zc * math.factorial(m) for m, zc in enumerate(zeta_taylor(jet, order))]


# -- correction tables ---------------------------------------------------------------

@dataclass
class AjkTable:
    """Tensor coefficients of the polynomial-in-n eigenvalue correction."""

    J: int
    K: int
    M: int
    dim: int
    entries: dict = field(default_factory=dict)  # (j, k) -> SymTensor order j

    def a(self, j: int, k: int) -> SymTensor:
        if k == 0:
            if j == 0:
                return SymTensor.scalar(1.0, self.dim)
            return SymTensor.zero(j, self.dim)
        return self.entries.get((j, k), SymTensor.zero(j, self.dim))


def _composition_sums(zc: list, J: int, kmax: int, jmax: int, dim: int) -> dict:
    """T[k][j] = sum over ordered compositions (j_1..j_k >= J, sum=j) of the
    product of the Taylor coefficient tensors."""
    T = {1: {j: zc[j] for j in range(J, jmax + 1)}}
    for k in range(2, kmax + 1):
        T[k] = {}
        for j in range(k * J, jmax + 1):
            acc = SymTensor.zero(j, dim)
            for j1 in range(J, j - (k - 1) * J + 1):
                acc = acc + sym_outer(zc[j1], T[k - 1][j - j1])
            T[k][j] = acc
    return T


def ajk_table(jet: SpectralJet, K: int, residual_tol: float = 1e-10) -> AjkTable:
    """Extract the n-power coefficients by evaluating the composition sums at
    integer n and solving the (tiny) Vandermonde system.

    The re-summation residual is verified at fresh n values; failure raises
    ``NumericsError``.
    """
    J = jet.J
    M = (K + 1) // (J - 2)
    jmax = K + 1 + 2 * M
    if jet.L < jmax:
        raise ValueError(f"jet order {jet.L} insufficient, need {jmax}")
    D = jet.dim
    zc = zeta_taylor(jet, jmax)
    for k in range(1, J):
        if k < len(zc) and zc[k].norm_inf() > 1e-9:
            raise NumericsError(
                f"normalized-ratio coefficient at order {k} is not zero "
                f"({zc[k].norm_inf():.2e}) though the Gaussian order is {J}")
    table = AjkTable(J=J, K=K, M=M, dim=D)
    if M < 1:
        return table
    T = _composition_sums(zc, J, M, jmax, D)

    van = np.array([[float(n) ** k for k in range(1, M + 1)]
                    for n in range(1, M + 1)])
    inv = np.linalg.inv(van)
    for j in range(J, jmax + 1):
        lhs = []
        for n in range(1, M + 1):
            acc = SymTensor.zero(j, D)
            for k in range(1, M + 1):
                if j in T.get(k, {}):
                    acc = acc + T[k][j] * float(math.comb(n, k))
            lhs.append(acc)
        cols = []
        for k in range(M):
            acc = SymTensor.zero(j, D)
            for n in range(M):
                acc = acc + lhs[n] * inv[k, n]
            cols.append(acc)
        for k in range(1, M + 1):
            if cols[k - 1].norm_inf() > 0:
                table.entries[(j, k)] = cols[k - 1]
        # fresh-point re-summation guard
        for n in range(M + 1, M + 4):
            direct = SymTensor.zero(j, D)
            for k in range(1, M + 1):
                if j in T.get(k, {}):
                    direct = direct + T[k][j] * float(math.comb(n, k))
            resummed = SymTensor.zero(j, D)
            for k in range(1, M + 1):
                resummed = resummed + table.a(j, k) * float(n ** k)
            scale = max(1.0, direct.norm_inf())
            if (direct - resummed).norm_inf() > residual_tol * scale:
                raise NumericsError(
                    f"re-summation residual at j={j}, n={n} exceeds {residual_tol}")
    return table


def resummation_residual(jet: SpectralJet, table: AjkTable, n_values) -> float:
    """Max residual of the n-power table against the direct composition sums."""
    J, M, K, D = table.J, table.M, table.K, table.dim
    jmax = K + 1 + 2 * M
    zc = zeta_taylor(jet, jmax)
    if M < 1:
        return 0.0
    T = _composition_sums(zc, J, M, jmax, D)
    worst = 0.0
    for j in range(J, jmax + 1):
        for n in n_values:
            direct = SymTensor.zero(j, D)
            resummed = SymTensor.zero(j, D)
            for k in range(1, M + 1):
                if j in T.get(k, {}):
                    direct = direct + T[k][j] * float(math.comb(int(n), k))
                resummed = resummed + table.a(j, k) * float(int(n) ** k)
            worst = max(worst, (direct - resummed).norm_inf())
    return worst


def poly_remainder_check(model: MarkovModel, jet: SpectralJet, table: AjkTable,
                         n_values, s_grid) -> dict:
    """Empirical decay order of the eigenvalue-power correction remainder.

    For each n, evaluates the exact normalized eigenvalue ratio at s/sqrt(n)
    by a direct eigensolve (independent of the jets), subtracts the tabled
    polynomial correction, weights by the half-argument Gaussian envelope and
    fits the decay slope of the max over the s grid.
    """
    D = jet.dim
    sig = np.asarray(jet.sigma, dtype=float)
    maxima = []
    for n in n_values:
        worst = 0.0
        for s in s_grid:
            s = np.asarray(s, dtype=float)
            u = s / math.sqrt(n)
            M = twisted(model, u[:-1], u[-1])
            lam = max(np.linalg.eigvals(M), key=abs)
            lamt = lam * np.exp(-1j * u[-1] * model.nutau)
            a_u = math.exp(-0.5 * float(u @ sig @ u))
            zeta = lamt / a_u
            zn = zeta ** n
            corr = 1.0 + 0j
            for (j, k), A in table.entries.items():
                corr += (float(n) ** k) * contract(A, vec_power(u, j)).value
            a_half = math.exp(-0.25 * float(s @ sig @ s))
            worst = max(worst, abs(zn - corr) * a_half)
        maxima.append(worst)
    logs = np.log(np.asarray(maxima))
    slope = float(np.polyfit(np.log(np.asarray(n_values, dtype=float)), logs, 1)[0])
    return {"n": list(map(int, n_values)), "max_remainder": maxima, "slope": slope}


# -- expansion coefficients -----------------------------------------------------------

@dataclass
class ExpansionCoefficients:
    """Coefficients of the inverse-power decay law, with a full term ledger."""

    d: int
    K: int
    nutau: float
    coeffs: list           # value at index p multiplies (t/nutau)^(-d/2-p)
    ledger: list = field(default_factory=list)
    max_imag: float = 0.0

    def in_t_powers(self) -> list:
        """Equivalent coefficients against plain powers of t."""
        return [c * self.nutau ** (self.d / 2.0 + p)
                for p, c in enumerate(self.coeffs)]

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "K": self.K,
            "nutau": self.nutau,
            "coeffs": list(self.coeffs),
            "coeffs_t_powers": self.in_t_powers(),
            "max_imag": self.max_imag,
            "ledger": self.ledger,
        }


def _admissible_tuples(target: int, J: int):
    """Non-negative (m, j, r, q, k) with m+j+r+q-2k = target and j >= kJ."""
    kmax = target // (J - 2) if target >= 0 else -1
    for k in range(0, max(kmax, 0) + 1):
        total = target + 2 * k
        if total < 0:
            continue
        jlo_range = [0] if k == 0 else range(k * J, total + 1)
        for j in jlo_range:
            for m in range(0, total - j + 1):
                for r in range(0, total - j - m + 1):
                    q = total - j - m - r
                    yield m, j, r, q, k


def _pair_geometry(f: Observable, g: Observable, r_max: int, d: int) -> dict:
    """Per term pair: lattice displacement and fiber (u - v)-moment table."""
    out = {}
    for ia, ta in enumerate(f.terms):
        mf = [ta.profile.moment(e) for e in range(r_max + 1)]
        for ib, tb in enumerate(g.terms):
            mg = [tb.profile.moment(e) for e in range(r_max + 1)]
            w = np.asarray(tb.cell, dtype=float) - np.asarray(ta.cell, dtype=float)
            smix = []
            for c in range(r_max + 1):
                acc = 0.0
                for e in range(c + 1):
                    acc += math.comb(c, e) * ((-1.0) ** (c - e)) * mf[e] * mg[c - e]
                smix.append(acc)
            out[ia, ib] = (w, smix)
    return out


def _displacement_tensor(w: np.ndarray, smix: list, r: int, d: int) -> SymTensor:
    """S_r tensor of integrated (lattice shift, fiber difference) powers."""
    from .symtensor import canonical_indices
    out = {}
    for key in canonical_indices(r, d + 1):
        c = sum(1 for i in key if i == d)
        lat = 1.0
        for i in key:
            if i < d:
                lat *= w[i]
        val = lat * smix[c]
        if val != 0:
            out[key] = complex(val)
    return SymTensor(r, d + 1, out)


def coefficients(model: MarkovModel, jet: SpectralJet, table: AjkTable,
                 f: Observable, g: Observable, K: int,
                 mode_check_tol: float = 1e-11,
                 half_order_target: int | None = None) -> ExpansionCoefficients:
    """Assemble the decay coefficients up to order K.

    For every admissible index tuple the scalar contribution is the full
    contraction of the kernel moment tensor against (projector bilinear form)
    x (displacement/fiber powers) x (correction table entry).  The two moment
    normalizations are computed and compared on first use of each kernel
    signature; disagreement beyond ``mode_check_tol`` fails loudly.

    ``half_order_target`` assembles a single off-lattice order (odd target)
    instead, for parity diagnostics; the result then carries that one value.
    """
    if K > table.K:
        raise ValueError("table was built for a smaller K")
    d = model.d
    sigma = clt_matrix(jet)
    nutau = jet.nutau
    J = table.J
    r_max = K + 2 * table.M + 2
    geom = _pair_geometry(f, g, r_max, d)

    bm_cache = {}
    def bm(ia, ib, m):
        if (ia, ib, m) not in bm_cache:
            bm_cache[ia, ib, m] = bm_form(model, jet, f.terms[ia].phi,
                                          g.terms[ib].phi, m)
        return bm_cache[ia, ib, m]

    moment_cache = {}
    def kernel_moment(alpha, gamma, q):
        key = (alpha, gamma, q)
        if key not in moment_cache:
            canon, other, l1 = h_moment_pair(alpha, gamma, q, sigma, nutau)
            diff = canon - other
            for idx in diff.coeffs:
                floor = mode_check_tol * max(1.0, abs(l1[idx]))
                if abs(diff[idx]) > floor:
                    raise NumericsError(
                        f"moment normalizations disagree at (alpha={alpha}, "
                        f"gamma={gamma}, q={q}), component {idx}")
            moment_cache[key] = canon
        return moment_cache[key]

    targets = ([half_order_target] if half_order_target is not None
               else [2 * p for p in range(K // 2 + 1)])
    values = []
    ledger = []
    max_imag = 0.0
    for target in targets:
        acc = 0j
        for m, j, r, q, k in _admissible_tuples(target, J):
            A = table.a(j, k)
            if j > 0 and A.norm_inf() == 0.0 and k == 0:
                continue
            alpha = m + j + r
            gamma = k - (m + j + d + r + 1) / 2.0
            Mq = kernel_moment(alpha, gamma, q)
            if Mq.norm_inf() == 0.0:
                continue
            prefac = (1j ** (m + j)) / (math.factorial(r) * math.factorial(m)
                                        * math.factorial(q))
            for (ia, ib), (w, smix) in geom.items():
                B = bm(ia, ib, m)
                if B.norm_inf() == 0.0:
                    continue
                X = _displacement_tensor(w, smix, r, d)
                if X.norm_inf() == 0.0:
                    continue
                block = sym_outer(sym_outer(B, X), A)
                term = prefac * contract(Mq, block).value
                if term != 0:
                    acc += term
                    ledger.append({
                        "target": target, "m": m, "j": j, "r": r, "q": q,
                        "k": k, "pair": [ia, ib],
                        "value_re": term.real, "value_im": term.imag,
                    })
        max_imag = max(max_imag, abs(acc.imag))
        values.append(acc.real)
    out = ExpansionCoefficients(d=d, K=K, nutau=nutau, coeffs=values,
                                ledger=ledger, max_imag=max_imag)
    return out


def predict(coeffs: ExpansionCoefficients, t: float) -> float:
    """Evaluate the truncated decay law at time t."""
    if t <= 0:
        raise ValueError("t must be positive")
    x = t / coeffs.nutau
    return sum(c * x ** (-(coeffs.d / 2.0) - p) for p, c in enumerate(coeffs.coeffs))
