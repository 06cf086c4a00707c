"""Finite-state probability-preserving maps with lattice marks and a roof.

A :class:`MarkovModel` is the concrete system everything else runs on: a
row-stochastic transition matrix with stationary vector nu, an integer lattice
mark kappa per state (nu-centered) and a positive roof time tau per state.
Its twisted transfer operators are small dense matrices, which makes both the
spectral machinery and two fully independent correlation oracles (frequency-
domain quadrature and plain Monte Carlo over the suspension flow) tractable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .poly import PiecewisePoly, apply_window, smooth_bump, smooth_step

__all__ = [
    "MarkovModel",
    "FiberProfile",
    "Observable",
    "ObsTerm",
    "GapReport",
    "ModelError",
    "GapError",
    "TruncationError",
    "stationary",
    "transfer_matrix",
    "twisted",
    "check_gap",
    "oracle_fourier",
    "oracle_fourier_batch",
    "oracle_mc",
    "reconstruct",
    "split_window",
    "random_model",
    "drift_symmetrize",
    "collision_window",
]


class ModelError(ValueError):
    """Model fails a structural invariant (stochasticity, centering, ...)."""


class GapError(RuntimeError):
    """Uniform spectral-gap certification failed; model rejected."""


class TruncationError(RuntimeError):
    """Frequency truncation error exceeds the requested tolerance."""

    def __init__(self, bound: float, requested: float):
        super().__init__(
            f"estimated truncation error {bound:.3e} exceeds tolerance {requested:.3e}")
        self.bound = bound
        self.requested = requested


# -- stationary vector and structural checks -------------------------------------

def _strongly_connected(trans: np.ndarray) -> bool:
    n, _ = connected_components(trans > 0, directed=True, connection="strong")
    return n == 1


def _period(trans: np.ndarray) -> int:
    """gcd of return-time differences along the adjacency graph."""
    S = trans.shape[0]
    adj = [np.nonzero(trans[i] > 0)[0] for i in range(S)]
    level = -np.ones(S, dtype=int)
    level[0] = 0
    queue = [0]
    g = 0
    while queue:
        x = queue.pop()
        for y in adj[x]:
            if level[y] < 0:
                level[y] = level[x] + 1
                queue.append(y)
            else:
                g = math.gcd(g, level[x] + 1 - level[y])
    return abs(g) if g else 0


def stationary(trans: np.ndarray) -> np.ndarray:
    """Unique left fixed probability vector of a row-stochastic matrix."""
    trans = np.asarray(trans, dtype=float)
    S = trans.shape[0]
    if np.max(np.abs(trans.sum(axis=1) - 1.0)) > 1e-12:
        raise ModelError("rows do not sum to 1 within 1e-12")
    if np.any(trans < -1e-15):
        raise ModelError("negative transition probability")
    if not _strongly_connected(trans):
        raise ModelError("chain is reducible")
    if _period(trans) != 1:
        raise ModelError("chain is periodic")
    w, v = np.linalg.eig(trans.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    nu = np.real(v[:, i])
    nu = nu / nu.sum()
    if np.any(nu <= 0):
        raise ModelError("stationary vector has non-positive entries")
    # polish with one fixed-point sweep for a clean residual
    for _ in range(10):
        res = nu @ trans - nu
        if np.max(np.abs(res)) < 1e-14:
            break
        nu = nu @ trans
        nu = nu / nu.sum()
    if np.max(np.abs(nu @ trans - nu)) > 1e-13:
        raise ModelError("stationary fixed point residual too large")
    return nu


@dataclass(frozen=True)
class MarkovModel:
    """Finite probability-preserving map with lattice mark and roof."""

    trans: np.ndarray
    kappa: np.ndarray  # (S, d) integers
    tau: np.ndarray    # (S,) positive
    nu: np.ndarray = field(default=None)

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=float)
        kappa = np.asarray(self.kappa)
        if kappa.ndim == 1:
            kappa = kappa[:, None]
        tau = np.asarray(self.tau, dtype=float)
        if trans.ndim != 2 or trans.shape[0] != trans.shape[1]:
            raise ModelError("trans must be square")
        S = trans.shape[0]
        if kappa.shape[0] != S or tau.shape[0] != S:
            raise ModelError("kappa/tau length mismatch with state count")
        if not np.issubdtype(kappa.dtype, np.integer):
            if np.max(np.abs(kappa - np.round(kappa))) > 0:
                raise ModelError("kappa must be integer-valued")
            kappa = np.round(kappa).astype(np.int64)
        if np.any(tau <= 0):
            raise ModelError("roof times must be positive")
        nu = stationary(trans) if self.nu is None else np.asarray(self.nu, dtype=float)
        drift = nu @ kappa
        if np.max(np.abs(drift)) > 1e-12:
            raise ModelError(
                f"kappa is not nu-centered (drift {drift}); "
                "use drift_symmetrize to build a centered model")
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "kappa", kappa.astype(np.int64))
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "nu", nu)

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def d(self) -> int:
        return self.kappa.shape[1]

    @property
    def tau_min(self) -> float:
        return float(np.min(self.tau))

    @property
    def tau_max(self) -> float:
        return float(np.max(self.tau))

    @property
    def nutau(self) -> float:
        return float(self.nu @ self.tau)

    def collision_window(self, t: float) -> tuple:
        """Index window [n-, n+] outside which nothing can land at time t."""
        n_minus = max(0, math.ceil(t / self.tau_max) - 2)
        n_plus = math.floor(t / self.tau_min) + 2
        return n_minus, n_plus


def collision_window(model: MarkovModel, t: float) -> tuple:
    return model.collision_window(t)


def transfer_matrix(model: MarkovModel) -> np.ndarray:
    """Duality partner of the Koopman operator with respect to nu.

    P[x, y] = nu(y) trans(y, x) / nu(x); rows sum to one and nu P = nu.
    """
    nu = model.nu
    return (model.trans.T * nu[None, :]) / nu[:, None]


def twisted(model: MarkovModel, theta, xi: float) -> np.ndarray:
    """Transfer matrix composed with the lattice/roof phase multiplier."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape[0] != model.d:
        raise ModelError(f"theta has dim {theta.shape[0]}, model lattice dim {model.d}")
    phase = np.exp(1j * (model.kappa @ theta + xi * model.tau))
    return transfer_matrix(model) * phase[None, :]


# -- admissible-model constructors -------------------------------------------------

def random_model(rng: np.random.Generator, n_states: int = 3, d: int = 1,
                 tau_spread: float = 0.25) -> MarkovModel:
    """Random admissible model with an exactly centered lattice mark.

    The stationary vector is prescribed as small rationals, the chain is the
    composition of two Metropolis kernels for that vector (stationary by
    construction, generically non-reversible), and integer marks are balanced
    against the rational weights so the drift vanishes to machine precision.
    """
    for _ in range(200):
        weights = rng.integers(1, 8, size=n_states).astype(float)
        nu = weights / weights.sum()
        kappa = np.zeros((n_states, d), dtype=np.int64)
        ok = True
        for j in range(d):
            kappa[:, j] = _balanced_marks(rng, weights)
            if np.all(kappa[:, j] == 0):
                ok = False
        if not ok:
            continue
        k1 = _metropolis(rng, nu)
        k2 = _metropolis(rng, nu)
        trans = k1 @ k2
        tau = 1.0 + tau_spread * (2.0 * rng.random(n_states) - 1.0)
        try:
            model = MarkovModel(trans, kappa, tau)
        except ModelError:
            continue
        # reject marks that live on a sublattice (degenerate phase at theta=pi)
        rad = max(abs(np.linalg.eigvals(twisted(model, [math.pi] * d, 0.0))).max()
                  for _ in range(1))
        if rad > 1 - 1e-4:
            continue
        return model
    raise RuntimeError("failed to draw an admissible random model")


def _balanced_marks(rng: np.random.Generator, weights: np.ndarray) -> np.ndarray:
    """Integer marks k with sum_i weights_i k_i = 0 exactly, not all equal."""
    n = len(weights)
    for _ in range(500):
        k = rng.integers(-2, 3, size=n)
        resid = int(np.dot(weights, k))
        # push the residue onto states in units of their weights
        order = rng.permutation(n)
        for idx in order:
            w = int(weights[idx])
            take = -int(np.sign(resid)) * (abs(resid) // w)
            take = int(np.clip(take, -3, 3))
            k[idx] += take
            resid += take * w
            if resid == 0:
                break
        if resid == 0 and np.any(k != 0) and math.gcd(*(int(abs(x)) for x in k)) <= 1:
            return k
    raise RuntimeError("could not balance lattice marks")


def _metropolis(rng: np.random.Generator, nu: np.ndarray) -> np.ndarray:
    """Metropolis kernel with symmetric random proposal; stationary for nu."""
    n = len(nu)
    prop = rng.random((n, n))
    prop = (prop + prop.T) / 2.0
    np.fill_diagonal(prop, 0.0)
    prop = prop / (1.05 * prop.sum(axis=1)).max()
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                k[i, j] = prop[i, j] * min(1.0, nu[j] / nu[i])
        k[i, i] = 1.0 - k[i].sum()
    return k


def drift_symmetrize(model_or_parts, eps: float = 0.3) -> MarkovModel:
    """Center a drifting mark by doubling states with a sign-flipped copy.

    The two copies share the transition law and swap with probability eps, so
    the stationary vector splits evenly and the drift cancels exactly.
    """
    if isinstance(model_or_parts, MarkovModel):
        trans, kappa, tau = model_or_parts.trans, model_or_parts.kappa, model_or_parts.tau
    else:
        trans, kappa, tau = model_or_parts
        trans = np.asarray(trans, dtype=float)
        kappa = np.asarray(kappa)
        if kappa.ndim == 1:
            kappa = kappa[:, None]
        tau = np.asarray(tau, dtype=float)
    S = trans.shape[0]
    big = np.zeros((2 * S, 2 * S))
    big[:S, :S] = (1 - eps) * trans
    big[:S, S:] = eps * trans
    big[S:, :S] = eps * trans
    big[S:, S:] = (1 - eps) * trans
    kap2 = np.concatenate([kappa, -kappa], axis=0)
    tau2 = np.concatenate([tau, tau])
    return MarkovModel(big, kap2, tau2)


# -- spectral gap certificate -------------------------------------------------------

@dataclass
class GapReport:
    """Certified uniform-gap parameters, or the offending grid points."""

    ok: bool
    b: float
    vartheta: float
    delta: float
    lead_min_inside: float
    second_max_inside: float
    rho_max_outside: float
    failures: list

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "b": self.b,
            "vartheta": self.vartheta,
            "delta": self.delta,
            "lead_min_inside": self.lead_min_inside,
            "second_max_inside": self.second_max_inside,
            "rho_max_outside": self.rho_max_outside,
            "failures": self.failures,
        }


def check_gap(model: MarkovModel, b: float = 0.5, n_theta: int = 48,
              n_xi: int = 17, delta_min: float = 1e-3) -> GapReport:
    """Scan twisted spectra for a uniform gap.

    Inside [-b, b]^{d+1} the second eigenvalue modulus must stay strictly
    below the leading one; outside the central block (theta in the complement
    annulus of the torus, |xi| <= b) the spectral radius must stay below
    1 - delta_min.  Raises ``GapError`` when certification fails.
    """
    d = model.d
    thetas_in = np.linspace(-b, b, n_xi)
    xis = np.linspace(-b, b, n_xi)
    lead_min, second_max = np.inf, 0.0
    failures = []

    import itertools
    for th in itertools.product(thetas_in, repeat=d):
        for xi in xis:
            mods = np.sort(np.abs(np.linalg.eigvals(twisted(model, th, xi))))[::-1]
            lead_min = min(lead_min, mods[0])
            second_max = max(second_max, mods[1] if len(mods) > 1 else 0.0)
            if len(mods) > 1 and mods[1] >= mods[0] - 1e-12:
                failures.append({"theta": list(th), "xi": float(xi),
                                 "kind": "no-gap-inside"})

    thetas_full = np.linspace(-math.pi, math.pi, n_theta, endpoint=False)
    rho_out = 0.0
    for th in itertools.product(thetas_full, repeat=d):
        if all(abs(c) <= b for c in th):
            continue
        for xi in xis:
            rho = float(np.max(np.abs(np.linalg.eigvals(twisted(model, th, xi)))))
            rho_out = max(rho_out, rho)
            if rho >= 1.0 - delta_min:
                failures.append({"theta": list(th), "xi": float(xi),
                                 "kind": "outer-radius", "rho": rho})

    vartheta = 0.5 * (second_max + lead_min)
    ok = (not failures) and second_max < lead_min and rho_out < 1.0 - delta_min
    report = GapReport(ok, b, vartheta, 1.0 - rho_out, lead_min, second_max,
                       rho_out, failures)
    if not ok:
        raise GapError(f"gap certification failed at {len(failures)} grid points")
    return report


# -- observables ---------------------------------------------------------------------

@dataclass
class FiberProfile:
    """Compactly supported fiber factor with a smoothness tag."""

    poly: PiecewisePoly
    smooth: bool = field(default=None)

    def __post_init__(self):
        if self.smooth is None:
            self.smooth = self.poly.is_continuous()

    @property
    def support(self) -> tuple:
        return self.poly.support

    def __call__(self, s):
        return self.poly(s)

    def fourier(self, xi):
        return self.poly.fourier(xi)

    def moment(self, e: int) -> float:
        return self.poly.moment(e)

    def derivative(self) -> "FiberProfile":
        d = self.poly.derivative()
        return FiberProfile(d, smooth=d.is_continuous())


@dataclass
class ObsTerm:
    cell: tuple
    phi: np.ndarray
    profile: FiberProfile

    def __post_init__(self):
        self.cell = tuple(int(c) for c in np.atleast_1d(self.cell))
        self.phi = np.asarray(self.phi, dtype=float)


@dataclass
class Observable:
    """Finite family of separable state x fiber terms over lattice cells."""

    terms: list
    d: int

    def __post_init__(self):
        for t in self.terms:
            if len(t.cell) != self.d:
                raise ModelError(f"cell {t.cell} has wrong lattice dimension")

    @property
    def cells(self) -> list:
        return sorted({t.cell for t in self.terms})

    def is_fiber_continuous(self) -> bool:
        return all(t.profile.smooth for t in self.terms)

    def family_value(self, cell: tuple, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        """h_cell(x, s) for arrays of states and fiber positions."""
        out = np.zeros(np.broadcast(x, s).shape)
        for t in self.terms:
            if t.cell == tuple(cell):
                out = out + t.phi[x] * t.profile(s)
        return out

    def mass(self, model: MarkovModel) -> float:
        """Total integral against nu x counting x Lebesgue."""
        return sum(float(model.nu @ t.phi) * t.profile.poly.integral()
                   for t in self.terms)

    def flow_derivative(self) -> "Observable":
        """Derivative along the suspension direction: differentiate profiles."""
        return Observable([ObsTerm(t.cell, t.phi.copy(), t.profile.derivative())
                           for t in self.terms], self.d)

    def scaled(self, alpha: float) -> "Observable":
        return Observable([ObsTerm(t.cell, alpha * t.phi, t.profile)
                           for t in self.terms], self.d)

    def __add__(self, other: "Observable") -> "Observable":
        if other.d != self.d:
            raise ModelError("lattice dimension mismatch")
        return Observable(list(self.terms) + list(other.terms), self.d)

    def validate_support(self, model: MarkovModel):
        """Support convention: profiles live in [-tau_min/10, tau(x)) wherever
        the state weight is non-zero."""
        lo_ok = -model.tau_min / 10.0 - 1e-12
        for t in self.terms:
            a, b = t.profile.support
            if a < lo_ok:
                raise ModelError(
                    f"profile support starts at {a:.6g}, below -tau_min/10")
            active = np.abs(t.phi) > 0
            if np.any(active) and b > np.min(model.tau[active]) + 1e-12:
                raise ModelError(
                    f"profile support ends at {b:.6g}, beyond the roof of an "
                    "active state")


def reconstruct(obs: Observable, model: MarkovModel, validate: bool = True):
    """Evaluator of the assembled function on the suspension space.

    h(x, cell, s) = h_cell(x, s) + h_{cell+kappa(x)}(Tx, s - tau(x)); the
    second term needs the successor state, so the evaluator takes it as an
    argument (for a chain realization the successor is part of the sample).
    All arguments are arrays over samples; ``cells`` has shape (N, d).
    """
    if validate:
        obs.validate_support(model)

    def h(x, cells, s, x_next):
        x = np.atleast_1d(np.asarray(x, dtype=int))
        x_next = np.atleast_1d(np.asarray(x_next, dtype=int))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        cells = np.atleast_2d(np.asarray(cells, dtype=int))
        out = np.zeros(x.shape, dtype=float)
        shifted = cells + model.kappa[x]
        for t in obs.terms:
            tc = np.asarray(t.cell, dtype=int)
            m1 = np.all(cells == tc[None, :], axis=1)
            if np.any(m1):
                out[m1] += t.phi[x[m1]] * t.profile(s[m1])
            m2 = np.all(shifted == tc[None, :], axis=1)
            if np.any(m2):
                out[m2] += t.phi[x_next[m2]] * t.profile(s[m2] - model.tau[x[m2]])
        return out

    return h


def split_window(fn, model: MarkovModel, cells: list, k: int = 4,
                 n_check: int = 0) -> Observable:
    """Split a separable function on the suspension into a compliant family.

    ``fn`` maps a cell to a list of (state weights, PiecewisePoly) pairs whose
    sum represents the function on [-tau_min/10, tau_max) over that cell.
    Each pair is windowed by the smooth ramp at the floor and, per state, by
    the complementary ramp at that state's roof, which restores the support
    convention while keeping every piece an exact polynomial.
    """
    eps = model.tau_min / 10.0
    terms = []
    for cell in cells:
        for phi, pp in fn(tuple(cell)):
            phi = np.asarray(phi, dtype=float)
            lowered = apply_window(pp, -eps, 0.0, k, "rise")
            for x in range(model.n_states):
                if phi[x] == 0:
                    continue
                roof = float(model.tau[x])
                wp = apply_window(lowered, roof - eps, roof, k, "fall")
                e = np.zeros(model.n_states)
                e[x] = phi[x]
                terms.append(ObsTerm(tuple(cell), e, FiberProfile(wp)))
    return Observable(terms, model.d)


# -- frequency-domain oracle ----------------------------------------------------

def _theta_nodes(d: int, n: int):
    """Uniform periodic grid on the torus with its (spectrally accurate)
    trapezoid weights; returns (nodes (M, d), weights (M,))."""
    import itertools
    axis = -math.pi + 2 * math.pi * np.arange(n) / n
    if d == 1:
        return axis[:, None], np.full(n, 2 * math.pi / n)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    return nodes, np.full(nodes.shape[0], (2 * math.pi / n) ** d)


def _xi_panels(intervals, width: float, nodes_per_panel: int = 16):
    """Gauss-Legendre panels covering the given [lo, hi] intervals."""
    gl_x, gl_w = np.polynomial.legendre.leggauss(nodes_per_panel)
    xs_all, ws_all = [], []
    for lo, hi in intervals:
        n_pan = max(2, int(math.ceil((hi - lo) / width)))
        edges = np.linspace(lo, hi, n_pan + 1)
        mid = (edges[:-1] + edges[1:]) / 2.0
        half = (edges[1:] - edges[:-1]) / 2.0
        xs_all.append((mid[:, None] + half[:, None] * gl_x[None, :]).ravel())
        ws_all.append((half[:, None] * gl_w[None, :]).ravel())
    return np.concatenate(xs_all), np.concatenate(ws_all)


def _profile_envelope(f: Observable, g: Observable, xs: np.ndarray) -> np.ndarray:
    ef = sum(np.abs(t.profile.fourier(-xs)) * np.max(np.abs(t.phi)) for t in f.terms)
    eg = sum(np.abs(t.profile.fourier(xs)) * np.max(np.abs(t.phi)) for t in g.terms)
    return np.asarray(ef * eg, dtype=float)


def _active_xi_intervals(model: MarkovModel, f: Observable, g: Observable,
                         ts, ximax: float, tol: float, pad: float):
    """Frequency zones that can carry non-negligible window mass.

    Outside the leading-eigenvalue region the windowed power sums are bounded
    by (eigen conditioning) * rho^{n_lo} / (1 - rho) with rho the spectral
    radius; zones where that bound times the profile envelope integrates
    below tol are skipped and their certified bound is reported instead.
    """
    n_lo = max(1, min(model.collision_window(t)[0] for t in ts))
    window = max(model.collision_window(t)[1] - model.collision_window(t)[0] + 1
                 for t in ts)
    probe = np.arange(0.0, ximax + 0.02, 0.02)
    thetas = np.linspace(-math.pi, math.pi, 13, endpoint=False)
    P = transfer_matrix(model).astype(complex)
    marks = model.kappa.astype(float)

    # batched spectra over the probe grid
    rho = np.zeros(probe.shape)
    cond = np.ones(probe.shape)
    for th in thetas:
        phase = np.exp(1j * (marks @ (np.ones(model.d) * th) +
                             np.outer(probe, model.tau)))
        mats = P[None, :, :] * phase[:, None, :]
        w, v = np.linalg.eig(mats)
        rho = np.maximum(rho, np.max(np.abs(w), axis=1))
        cond = np.maximum(cond, np.linalg.cond(v))
    rho = np.minimum(rho, 1.0 - 1e-12)
    env = _profile_envelope(f, g, probe)
    # certified bound on the skipped mass, both signs of xi
    mass = cond * np.minimum(float(window), rho ** n_lo / (1.0 - rho)) * env
    keep = mass >= tol / (8.0 * (2 * ximax)) * (2 * math.pi) ** (model.d + 1)
    skipped = 2.0 * float(np.trapezoid(np.where(keep, 0.0, mass), probe)) \
        / (2 * math.pi) ** (model.d + 1)

    intervals = []
    i = 0
    n = len(probe)
    while i < n:
        if keep[i]:
            j = i
            while j + 1 < n and keep[j + 1]:
                j += 1
            lo = max(0.0, probe[i] - pad)
            hi = min(ximax, probe[j] + pad)
            if intervals and lo <= intervals[-1][1] + 1e-12:
                intervals[-1] = (intervals[-1][0], hi)
            else:
                intervals.append((lo, hi))
            i = j + 1
        else:
            i += 1
    if not intervals:
        intervals = [(0.0, min(1.0, ximax))]
    both = [(-hi, -lo) for lo, hi in reversed(intervals) if hi > 0]
    both += [(lo, hi) for lo, hi in intervals if hi > 0]
    if intervals and intervals[0][0] == 0.0:
        # merge the two central images into one symmetric interval
        lo0, hi0 = intervals[0]
        both = [iv for iv in both if iv != (-hi0, -lo0) and iv != (lo0, hi0)]
        both.insert(len(both) // 2, (-hi0, hi0))
    return sorted(both), skipped


def _profile_tail_integral(f: Observable, g: Observable, ximax: float) -> float:
    """Upper bound for the neglected frequency tail of |f-hat| |g-hat|.

    Samples the exact transforms on [ximax, 4*ximax], fits the power-law
    envelope and integrates it beyond the sampled range.
    """
    xs = np.geomspace(ximax, 4 * ximax, 80)
    ef = sum(np.abs(t.profile.fourier(xs)) * np.max(np.abs(t.phi)) for t in f.terms)
    eg = sum(np.abs(t.profile.fourier(xs)) * np.max(np.abs(t.phi)) for t in g.terms)
    prod = np.maximum(ef * eg, 1e-300)
    # integrate the samples, then extrapolate past 4*ximax with the fitted slope
    base = float(np.trapezoid(prod, xs))
    p = -np.polyfit(np.log(xs), np.log(prod), 1)[0]
    tail = float(prod[-1] * xs[-1] / max(p - 1.0, 1.0))
    return 2.0 * (base + tail)  # both signs of xi


def default_ximax(model: MarkovModel, f: Observable, g: Observable,
                  t: float, tol: float = 1e-12) -> tuple:
    """Smallest cutoff with profile-decay tail bound below tol/(window length)."""
    n_minus, n_plus = model.collision_window(t)
    target = tol / max(1, n_plus - n_minus)
    ximax = 8.0
    while ximax < 4096:
        bound = _profile_tail_integral(f, g, ximax) / (2 * math.pi)
        if bound < target:
            return ximax, bound * max(1, n_plus - n_minus)
        ximax *= 1.5
    raise TruncationError(bound * max(1, n_plus - n_minus), tol)


def greenkubo_sigma(model: MarkovModel, include_tau: bool = True,
                    tol: float = 1e-15, n_cap: int = 100_000) -> np.ndarray:
    """Summed-autocovariance matrix of (kappa, tau - mean) by plain powers.

    Sigma = C_0 + sum_{n>=1} (C_n + C_n^T) with C_n the stationary lag-n
    cross-covariance; the powers are iterated directly until the increments
    fall below tol, with no spectral machinery involved.
    """
    v = model.kappa.astype(float)
    if include_tau:
        v = np.concatenate([v, (model.tau - model.nutau)[:, None]], axis=1)
    v = v - model.nu @ v  # centered componentwise
    w = model.nu[:, None] * v
    sigma = v.T @ w  # C_0
    cur = v.copy()
    for _ in range(n_cap):
        cur = model.trans @ cur  # E[v(X_n) | X_0 = x]
        c = w.T @ cur
        sigma += c + c.T
        if np.max(np.abs(c)) < tol:
            break
    return sigma


def _grid_parameters(model: MarkovModel, ts, level: int = 0):
    """Torus size and panel width adequate for the largest requested time.

    The torus grid must out-run the lattice spread (wrap-around mass at
    distance n_theta is a genuine correlation and must be negligible); the
    panel width must resolve the residual phases tau_n - t of the collision
    window.
    """
    tmax = max(ts)
    n_bound = tmax / model.tau_min + 4
    sigma = greenkubo_sigma(model)
    sig_kappa = float(np.max(np.linalg.eigvalsh(sigma[:model.d, :model.d])))
    n_theta = int(math.ceil(math.sqrt(2.0 * 1.4 * sig_kappa * n_bound
                                      * math.log(1e11)))) + 8
    n_theta = max(24, n_theta)
    var_tau = 1.4 * float(sigma[model.d, model.d]) + 1e-4
    nutau = model.nutau
    drift = max(nutau / model.tau_min - 1.0, 1.0 - nutau / model.tau_max)
    f_eff = tmax * drift + math.sqrt(2.0 * var_tau * n_bound * math.log(1e13)) + 16.0
    width = 2 * math.pi * 2.5 / f_eff
    scale = 1.45 ** level
    return int(math.ceil(n_theta * math.sqrt(scale))), width / scale


def _geometric_window(lam: np.ndarray, a: int, b: int) -> np.ndarray:
    """sum_{n=a}^{b} lam^n for arrays of complex lam with |lam| <= 1.

    Uses the closed form away from lam = 1 and a Taylor expansion of the
    partial geometric sum near it; lam = 0 contributes only the n = 0 term.
    """
    lam = np.asarray(lam, dtype=complex)
    out = np.zeros(lam.shape, dtype=complex)
    zero = lam == 0
    if np.any(zero):
        out[zero] = 1.0 if a == 0 else 0.0
    s = lam - 1.0
    m = b - a + 1
    near = (np.abs(s) < 1e-7) & ~zero
    if np.any(near):
        sn = s[near]
        # lam^a * ((1+s)^m - 1)/s, Taylor in s
        head = m + m * (m - 1) / 2.0 * sn + m * (m - 1) * (m - 2) / 6.0 * sn ** 2
        out[near] = lam[near] ** a * head
    rest = ~near & ~zero
    if np.any(rest):
        lr = lam[rest]
        out[rest] = (lr ** a - lr ** (b + 1)) / (1.0 - lr)
    return out


def _fourier_sweep(model: MarkovModel, f: Observable, g: Observable, ts,
                   n_theta: int, xi_width: float, xi_intervals):
    """Spectral evaluation of the twisted window sums over the frequency grid.

    Each grid node's twisted matrix is diagonalized once; the sum over the
    collision window becomes a geometric series per eigenvalue, so the cost
    is independent of t.  Nodes whose eigenbasis is ill-conditioned fall back
    to the direct power walk.
    """
    d = model.d
    S = model.n_states
    P = transfer_matrix(model).astype(complex)
    theta, w_theta = _theta_nodes(d, n_theta)
    xi_all, w_xi_all = _xi_panels(xi_intervals, xi_width)
    n_th = theta.shape[0]

    windows = {t: (max(0, model.collision_window(t)[0]),
                   model.collision_window(t)[1]) for t in ts}
    pair_phase = {}
    for ia, ta in enumerate(f.terms):
        for ib, tb in enumerate(g.terms):
            dl = np.asarray(tb.cell, dtype=float) - np.asarray(ta.cell, dtype=float)
            pair_phase[ia, ib] = (np.exp(-1j * (theta @ dl)) * w_theta)

    phase_th = np.exp(1j * (theta @ model.kappa.T))  # (n_th, S)
    fvecs = [ta.phi.astype(complex) for ta in f.terms]
    gweights = [model.nu * tb.phi for tb in g.terms]
    out = {t: 0.0 + 0j for t in ts}

    block = max(1, int(2.0e5 // max(1, n_th)))
    for start in range(0, xi_all.shape[0], block):
        xi = xi_all[start: start + block]
        w_xi = w_xi_all[start: start + block]
        n_xi = xi.shape[0]
        phase_xi = np.exp(1j * np.outer(xi, model.tau))  # (n_xi, S)
        D = (phase_th[:, None, :] * phase_xi[None, :, :]).reshape(-1, S)
        mats = P[None, :, :] * D[:, None, :]
        lam, V = np.linalg.eig(mats)
        cond = np.linalg.cond(V)
        good = cond < 1e7
        Vg = V[good]
        Vinv = np.linalg.inv(Vg)
        lam_g = lam[good]
        bad_idx = np.nonzero(~good)[0]

        # spectral pairings per term pair: row (nu*phi_b) V, col V^{-1} phi_a
        pair_coef = {}
        for ia, fv in enumerate(fvecs):
            col = Vinv @ fv
            for ib, wb in enumerate(gweights):
                row = np.einsum("s,gse->ge", wb, Vg)
                pair_coef[ia, ib] = row * col

        for t in ts:
            lo, hi = windows[t]
            geom = _geometric_window(lam_g, lo, hi)
            phases = np.exp(-1j * xi * t)
            for ia, ta in enumerate(f.terms):
                fa = ta.profile.fourier(-xi)
                for ib, tb in enumerate(g.terms):
                    gb = tb.profile.fourier(xi)
                    Wg = np.sum(pair_coef[ia, ib] * geom, axis=1)
                    W = np.zeros(n_xi * n_th, dtype=complex)
                    W[good] = Wg
                    if bad_idx.size:
                        W[bad_idx] = _direct_window(
                            mats[bad_idx], fvecs[ia], gweights[ib], lo, hi)
                    grid = W.reshape(n_th, n_xi)
                    red = pair_phase[ia, ib] @ grid
                    out[t] += np.sum(w_xi * phases * fa * gb * red)
    return {t: v / (2 * math.pi) ** (d + 1) for t, v in out.items()}


def _direct_window(mats: np.ndarray, fv: np.ndarray, wb: np.ndarray,
                   lo: int, hi: int) -> np.ndarray:
    """Window sums by plain power walk for a small set of matrices."""
    n = mats.shape[0]
    v = np.broadcast_to(fv, (n, fv.shape[0])).copy()
    acc = np.zeros(n, dtype=complex)
    for step in range(hi + 1):
        if step > 0:
            v = np.einsum("gxy,gy->gx", mats, v)
        if step >= lo:
            acc += v @ wb
    return acc


def oracle_fourier_batch(model: MarkovModel, f: Observable, g: Observable, ts,
                         ximax: float | None = None, n_theta: int | None = None,
                         xi_width: float | None = None, tol: float = 1e-9,
                         trunc_tol: float = 1e-12, refine: bool = True,
                         allow_small_t: bool = False) -> dict:
    """Direct correlation values by frequency-domain quadrature.

    Torus integral by periodic trapezoid, frequency integral by panelized
    Gauss-Legendre over [-ximax, ximax] with the neglected tail bounded from
    the exact profile transforms.  With ``refine`` a denser pass must agree
    to ``tol`` (absolute), otherwise ``TruncationError`` is raised.
    Returns {t: (value, error_estimate)}.
    """
    ts = sorted(float(t) for t in ts)
    if not allow_small_t and ts[0] <= 10 * model.tau_max:
        raise ModelError("correlation time too small for the window argument; "
                         "pass allow_small_t=True for diagnostic use")
    if not (f.is_fiber_continuous() or g.is_fiber_continuous()):
        raise ModelError("one of the two observables must be fiber-continuous")
    f.validate_support(model)
    g.validate_support(model)
    if ximax is None:
        ximax, tail_bound = default_ximax(model, f, g, max(ts), tol=trunc_tol)
    else:
        tail_bound = _profile_tail_integral(f, g, ximax) / (2 * math.pi) \
            * max(1, model.collision_window(max(ts))[1])
    nt0, w0 = _grid_parameters(model, ts, level=0)
    if n_theta is not None:
        nt0 = n_theta
    if xi_width is not None:
        w0 = xi_width
    zones, skip_bound = _active_xi_intervals(model, f, g, ts, ximax,
                                             max(tol / 4.0, trunc_tol),
                                             pad=max(0.25, 3.0 * w0))
    vals0 = _fourier_sweep(model, f, g, ts, nt0, w0, zones)
    if not refine:
        return {t: (vals0[t].real, tail_bound + skip_bound) for t in ts}
    nt1, w1 = _grid_parameters(model, ts, level=1)
    nt1 = max(nt1, nt0 + 8)
    vals1 = _fourier_sweep(model, f, g, ts, nt1, min(w1, w0 / 1.3), zones)
    out = {}
    for t in ts:
        err = abs(vals1[t] - vals0[t]) + tail_bound + skip_bound \
            + abs(vals1[t].imag)
        if err > max(tol, 1e-7 * abs(vals1[t])):
            raise TruncationError(err, tol)
        out[t] = (vals1[t].real, err)
    return out


def oracle_fourier(model: MarkovModel, f: Observable, g: Observable, t: float,
                   ximax: float | None = None, n_theta: int | None = None,
                   n_xi: int | None = None, tol: float = 1e-9,
                   allow_small_t: bool = False) -> float:
    """Single-time frequency-domain correlation value."""
    width = None
    if n_xi is not None and ximax is not None:
        width = 2.0 * ximax / max(1, n_xi // 16)
    res = oracle_fourier_batch(model, f, g, [t], ximax=ximax, n_theta=n_theta,
                               xi_width=width, tol=tol,
                               allow_small_t=allow_small_t)
    return res[float(t)][0]


# -- Monte Carlo oracle ------------------------------------------------------------

def oracle_mc(model: MarkovModel, f: Observable, g: Observable, t: float,
              N: int, seed: int, batch: int = 1_000_000,
              n_batches_se: int = 64) -> tuple:
    """Plain Monte Carlo estimate of the correlation at time t.

    Draws (state, fiber height) from the stationary suspension measure with
    the roof as importance weight, flows each sample for time t along a
    sampled chain path, and averages f * g(endpoint).  Deterministic for a
    fixed seed: chunk streams are spawned from a counter-based generator and
    reduced in order.
    """
    if N < 10_000:
        raise ModelError("N < 1e4 gives a meaningless standard error")
    f.validate_support(model)
    g.validate_support(model)
    h_g = reconstruct(g, model, validate=False)
    S = model.n_states
    cum = np.cumsum(model.trans, axis=1)
    # the assembled f is non-zero on its term cells and one mark-step below
    f_cells = set(f.cells)
    for c in f.cells:
        for x in range(S):
            f_cells.add(tuple(np.asarray(c) - model.kappa[x]))
    f_cells = sorted(f_cells)
    slice_len = max(1, N // n_batches_se)
    batch_sums = np.zeros(n_batches_se)
    total_sum = 0.0
    total_sq = 0.0
    count = 0
    chunk_id = 0
    while count < N:
        n = min(batch, N - count)
        rng = np.random.Generator(np.random.Philox(key=(seed, chunk_id)))
        chunk_id += 1
        x0 = rng.choice(S, size=n, p=model.nu)
        s0 = rng.random(n) * model.tau[x0]
        weight = model.tau[x0]
        h = s0 + t
        # walk the chain until the flow lands below the roof
        x = x0.copy()
        x1 = None
        cum_tau = np.zeros(n)
        cum_kap = np.zeros((n, model.d), dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        xn = np.zeros(n, dtype=np.int64)
        xn1 = np.zeros(n, dtype=np.int64)
        s_end = np.zeros(n)
        kap_end = np.zeros((n, model.d), dtype=np.int64)
        guard = int(math.ceil((t + model.tau_max) / model.tau_min)) + 3
        for step in range(guard + 1):
            landing = (~done) & (h < cum_tau + model.tau[x])
            if np.any(landing):
                xn[landing] = x[landing]
                s_end[landing] = h[landing] - cum_tau[landing]
                kap_end[landing] = cum_kap[landing]
            u = rng.random(n)
            nxt = (u[:, None] > cum[x]).sum(axis=1)
            if step == 0:
                x1 = nxt.copy()
            if np.any(landing):
                xn1[landing] = nxt[landing]
            done |= landing
            if np.all(done):
                break
            cum_tau = np.where(done, cum_tau, cum_tau + model.tau[x])
            cum_kap = np.where(done[:, None], cum_kap, cum_kap + model.kappa[x])
            x = np.where(done, x, nxt)
        if not np.all(done):
            raise RuntimeError("flow walk exceeded its step guard")
        h_f = reconstruct(f, model, validate=False)
        vals = np.zeros(n)
        for cell in f_cells:
            cells0 = np.tile(np.asarray(cell, dtype=int), (n, 1))
            ftot = h_f(x0, cells0, s0, x1)
            live = ftot != 0
            if not np.any(live):
                continue
            gv = h_g(xn[live], cells0[live] + kap_end[live], s_end[live], xn1[live])
            vals[live] += ftot[live] * gv
        vals *= weight
        slots = np.minimum((count + np.arange(n)) // slice_len, n_batches_se - 1)
        np.add.at(batch_sums, slots, vals)
        total_sum += float(np.sum(vals))
        total_sq += float(np.sum(vals ** 2))
        count += n
    mean = total_sum / count
    # batch means over fixed-size slices of the ordered sample stream
    sizes = np.full(n_batches_se, slice_len, dtype=float)
    sizes[-1] = count - slice_len * (n_batches_se - 1)
    means = batch_sums / sizes
    stderr = float(np.std(means, ddof=1) / math.sqrt(n_batches_se))
    return mean, stderr
