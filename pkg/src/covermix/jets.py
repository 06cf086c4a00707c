"""Exact perturbation jets of the leading eigendata of twisted transfer matrices.

At zero twist the transfer matrix has the simple eigenvalue 1 with right
eigenvector 1 and left eigenvector nu.  Derivatives of the twisted family in
the twist parameters are exact monomial multipliers, so the leading
eigenvalue, eigenvectors and spectral projector admit an order-by-order
recursion whose only numerical step is a fixed well-conditioned linear solve
(the reduced resolvent on the complement of the fixed line).  No numerical
differentiation is involved anywhere; finite differences appear only in
tests.

Jets are stored per order m as dicts mapping canonical multi-indices over the
d+1 twist coordinates to payloads (scalars, state vectors or matrices); the
symmetrized product of two jets uses the same multiset-split weights as the
tensor algebra.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .gauss import CovMatrix, NotSPDError, char_fn_taylor
from .markov import MarkovModel, transfer_matrix
from .symtensor import SymTensor, canonical_indices

__all__ = [
    "SpectralJet",
    "ConditioningError",
    "matrix_jet",
    "matrix_taylor",
    "eigen_jet",
    "clt_matrix",
    "detect_J",
    "bm_form",
    "jet_mul",
    "jet_zero",
]


class ConditioningError(RuntimeError):
    """Reduced resolvent too ill-conditioned for reliable jets."""


# -- jet container helpers ------------------------------------------------------

def jet_zero(order: int, dim: int, shape) -> dict:
    zero = 0j if shape == () else np.zeros(shape, dtype=complex)
    return {key: (zero if shape == () else zero.copy())
            for key in canonical_indices(order, dim)}


def _merge_weight(target: Counter, part: Counter) -> int:
    w = 1
    for v, c in part.items():
        w *= math.comb(target[v], c)
    return w


def jet_mul(a: dict, b: dict, order_a: int, order_b: int, dim: int, combine) -> dict:
    """Symmetrized product of two jets with a caller-chosen payload product."""
    total = math.comb(order_a + order_b, order_a)
    out = {}
    for ia, va in a.items():
        ca = Counter(ia)
        for ib, vb in b.items():
            key = tuple(sorted(ia + ib))
            w = _merge_weight(Counter(key), ca) / total
            contrib = combine(va, vb)
            if key in out:
                out[key] = out[key] + contrib * w
            else:
                out[key] = contrib * w
    return out


def _jet_add(a: dict, b: dict, alpha: complex = 1.0) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) + alpha * v
    return out


def _jet_to_symtensor(jet: dict, order: int, dim: int, scale: float = 1.0) -> SymTensor:
    return SymTensor(order, dim,
                     {k: complex(v) * scale for k, v in jet.items() if v != 0})


# -- exact matrix derivatives ------------------------------------------------------

def matrix_jet(model: MarkovModel, alpha) -> np.ndarray:
    """Partial derivative of the twisted matrix at zero twist.

    For the multi-index alpha over (lattice coordinates..., roof coordinate)
    this is the plain transfer matrix times the diagonal monomial
    (i kappa_1)^{a_1} ... (i tau)^{a_last} -- exact, no differencing.
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != model.d + 1:
        raise ValueError(f"alpha must have length {model.d + 1}")
    marks = np.concatenate([model.kappa.astype(float),
                            model.tau[:, None]], axis=1)
    diag = np.ones(model.n_states, dtype=complex)
    for i, a in enumerate(alpha):
        diag *= (1j * marks[:, i]) ** a
    return transfer_matrix(model).astype(complex) * diag[None, :]


def matrix_taylor(model: MarkovModel, L: int) -> list:
    """Taylor coefficient jets of the twisted matrix family, orders 0..L."""
    D = model.d + 1
    marks = np.concatenate([model.kappa.astype(float),
                            model.tau[:, None]], axis=1)
    P = transfer_matrix(model).astype(complex)
    out = [{(): P}]
    for m in range(1, L + 1):
        jet = {}
        fact = math.factorial(m)
        for key in canonical_indices(m, D):
            diag = np.ones(model.n_states, dtype=complex)
            for i in key:
                diag *= 1j * marks[:, i]
            jet[key] = P * (diag[None, :] / fact)
        out.append(jet)
    return out


# -- the spectral jet ---------------------------------------------------------------

@dataclass
class SpectralJet:
    """Leading eigendata derivatives at zero twist, plus derived quantities.

    ``lambda_jet``/``lambda_tilde_jet`` hold derivative tensors (order m has
    the m-th differential, i.e. m! times the Taylor coefficient); ``pi_jet``
    holds the projector differentials as index -> matrix maps.
    """

    L: int
    dim: int
    lambda_jet: list
    lambda_tilde_jet: list
    pi_jet: list
    sigma: np.ndarray
    nutau: float
    J: int
    b: float = 0.0
    _lam_taylor: list = field(default=None, repr=False)
    _lamt_taylor: list = field(default=None, repr=False)
    _pi_taylor: list = field(default=None, repr=False)

    def lambda_tilde_taylor(self) -> list:
        return self._lamt_taylor

    def pi_taylor(self) -> list:
        return self._pi_taylor

    def to_json(self) -> str:
        payload = {
            "L": self.L,
            "dim": self.dim,
            "nutau": self.nutau,
            "J": self.J,
            "b": self.b,
            "sigma": np.asarray(self.sigma).tolist(),
            "lambda": [t.to_json() for t in self.lambda_jet],
            "lambda_tilde": [t.to_json() for t in self.lambda_tilde_jet],
            "pi": [
                {"order": m,
                 "entries": [[[i + 1 for i in key],
                              np.real(mat).tolist(), np.imag(mat).tolist()]
                             for key, mat in sorted(jet.items())]}
                for m, jet in enumerate(self.pi_jet)
            ],
        }
        return json.dumps(payload)


def eigen_jet(model: MarkovModel, L: int, b: float = 0.0,
              cond_limit: float = 1e12, j_tol: float = 1e-9) -> SpectralJet:
    """Order-by-order perturbation recursion for the leading eigentriple.

    Right jets are gauged by nu . v == 1, left jets by w . 1 == 1; the
    projector jets come from v w^T renormalized by the scalar jet of w . v,
    so every identity (projector idempotence, eigen-relation) holds to
    solver precision at all orders.
    """
    if L > 12:
        raise ValueError("jet order capped at 12")
    D = model.d + 1
    S = model.n_states
    nu = model.nu.astype(complex)
    one = np.ones(S, dtype=complex)
    Pc = matrix_taylor(model, L)
    P0 = Pc[0][()]

    A = P0 - np.eye(S) + np.outer(one, nu)
    cond = np.linalg.cond(A)
    if cond > cond_limit:
        raise ConditioningError(
            f"reduced resolvent condition number {cond:.3e} exceeds {cond_limit:.1e}")
    lu = scipy.linalg.lu_factor(A)

    lamc = [{(): 1.0 + 0j}]
    vc = [{(): one.copy()}]
    wc = [{(): nu.copy()}]

    for m in range(1, L + 1):
        # Q_m = sum_{a>=1} P_a v_{m-a}
        Q = jet_zero(m, D, (S,))
        for a in range(1, m + 1):
            Q = _jet_add(Q, jet_mul(Pc[a], vc[m - a], a, m - a, D,
                                    lambda M, x: M @ x))
        lam_m = {key: complex(nu @ Q[key]) for key in Q}
        rhs = {key: lam_m[key] * one - Q[key] for key in Q}
        for a in range(1, m):
            cross = jet_mul(lamc[a], vc[m - a], a, m - a, D,
                            lambda s, x: s * x)
            rhs = _jet_add(rhs, cross)
        v_m = {key: scipy.linalg.lu_solve(lu, rhs[key]) for key in rhs}
        lamc.append(lam_m)
        vc.append(v_m)

        # left side: w_m (P0 - I) = -sum_{b<m} w_b P_{m-b} + sum_{a>=1} lam_a w_{m-a}
        rhs_w = jet_zero(m, D, (S,))
        for bidx in range(0, m):
            rhs_w = _jet_add(rhs_w, jet_mul(wc[bidx], Pc[m - bidx], bidx, m - bidx,
                                            D, lambda w, M: w @ M), alpha=-1.0)
        for a in range(1, m + 1):
            rhs_w = _jet_add(rhs_w, jet_mul(lamc[a], wc[m - a], a, m - a, D,
                                            lambda s, w: s * w))
        w_m = {key: scipy.linalg.lu_solve(lu, rhs_w[key], trans=1) for key in rhs_w}
        wc.append(w_m)

    # lambda-tilde: multiply by the scalar jet of the roof-recentering phase
    recenter = [{(): 1.0 + 0j}]
    shift = np.zeros(D)
    shift[-1] = 1.0
    for m in range(1, L + 1):
        fact = math.factorial(m)
        jet = {}
        for key in canonical_indices(m, D):
            if all(i == D - 1 for i in key):
                jet[key] = (-1j * model.nutau) ** m / fact
        recenter.append(jet)
    lamt = []
    for m in range(L + 1):
        acc = {}
        for a in range(0, m + 1):
            acc = _jet_add(acc, jet_mul(lamc[a], recenter[m - a], a, m - a, D,
                                        lambda x, y: x * y))
        lamt.append(acc)

    # projector jets: (v x w) / (w . v)
    sc = []
    for m in range(L + 1):
        acc = {}
        for a in range(0, m + 1):
            acc = _jet_add(acc, jet_mul(wc[a], vc[m - a], a, m - a, D,
                                        lambda w, x: complex(w @ x)))
        sc.append(acc)
    rc = [{(): 1.0 / sc[0][()]}]
    for m in range(1, L + 1):
        acc = jet_zero(m, D, ())
        for a in range(1, m + 1):
            acc = _jet_add(acc, jet_mul(sc[a], rc[m - a], a, m - a, D,
                                        lambda x, y: x * y))
        rc.append({key: -acc[key] / sc[0][()] for key in acc})
    pic = []
    for m in range(L + 1):
        acc = jet_zero(m, D, (S, S))
        for a in range(0, m + 1):
            uv = {}
            for e in range(0, a + 1):
                uv = _jet_add(uv, jet_mul(vc[e], wc[a - e], e, a - e, D,
                                          lambda x, w: np.outer(x, w)))
            acc = _jet_add(acc, jet_mul(uv, rc[m - a], a, m - a, D,
                                        lambda M, s: M * s))
        pic.append(acc)

    sigma = _sigma_from_lamt(lamt, D)
    lam_jets = [_jet_to_symtensor(lamc[m], m, D, math.factorial(m))
                for m in range(L + 1)]
    lamt_jets = [_jet_to_symtensor(lamt[m], m, D, math.factorial(m))
                 for m in range(L + 1)]
    pi_jets = [{key: mat * math.factorial(m) for key, mat in pic[m].items()}
               for m in range(L + 1)]
    jet = SpectralJet(L=L, dim=D, lambda_jet=lam_jets, lambda_tilde_jet=lamt_jets,
                      pi_jet=pi_jets, sigma=sigma, nutau=model.nutau, J=0, b=b,
                      _lam_taylor=lamc, _lamt_taylor=lamt, _pi_taylor=pic)
    jet.J = detect_J(jet, tol=j_tol)
    return jet


def _sigma_from_lamt(lamt: list, D: int) -> np.ndarray:
    mat = np.zeros((D, D), dtype=complex)
    for i in range(D):
        for j in range(D):
            key = tuple(sorted((i, j)))
            mat[i, j] = -2.0 * lamt[2].get(key, 0j)
    if np.max(np.abs(mat.imag)) > 1e-10:
        raise ConditioningError("second-order jet has a non-real part")
    return (mat.real + mat.real.T) / 2.0


def clt_matrix(jet: SpectralJet) -> CovMatrix:
    """Covariance of the joint mark/roof fluctuations, from the order-2 jet.

    Raises ``NotSPDError`` when the model is degenerate (e.g. constant roof),
    which rejects it for expansion use.
    """
    if jet.L < 2:
        raise ValueError("jet order must be at least 2")
    return CovMatrix(_sigma_from_lamt(jet.lambda_tilde_taylor(), jet.dim))


def detect_J(jet: SpectralJet, tol: float = 1e-9) -> int:
    """Largest J with all recentered-eigenvalue jets Gaussian below order J."""
    ac = char_fn_taylor(jet.sigma, jet.L)
    J = jet.L + 1
    for k in range(jet.L + 1):
        lam_k = jet.lambda_tilde_jet[k]
        a_k = ac[k] * math.factorial(k)
        scale = max(1.0, a_k.norm_inf())
        if (lam_k - a_k).norm_inf() > tol * scale:
            J = k
            break
    if J < 3:
        raise ConditioningError(
            f"Gaussian-matching order {J} below 3: inconsistent covariance")
    return J


def bm_form(model: MarkovModel, jet: SpectralJet, F, G, m: int) -> SymTensor:
    """Mixing bilinear form of order m: nu-average of G times the projector
    derivative applied to F."""
    if m > jet.L:
        raise ValueError("m exceeds the available jet order")
    F = np.asarray(F, dtype=complex)
    G = np.asarray(G, dtype=complex)
    out = {}
    for key, mat in jet.pi_jet[m].items():
        val = complex(model.nu @ (G * (mat @ F)))
        if val != 0:
            out[key] = val
    return SymTensor(m, jet.dim, out)
