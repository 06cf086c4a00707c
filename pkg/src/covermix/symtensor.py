"""Symmetric multilinear forms on C^D.

A symmetric m-linear form is stored sparsely: one complex coefficient per
*canonical* multi-index (a non-decreasing tuple of coordinate indices).  All
algebra -- the symmetrized product ``sym_outer``, the partial contraction
``contract`` and power evaluation -- works directly on canonical entries with
exact multinomial weights, so no permutation is ever enumerated at run time.

Indices are 0-based internally; the JSON serialization uses 1-based indices
(see ``to_json``/``from_json`` and the schema in docs/formats.md).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

__all__ = [
    "SymTensor",
    "symmetrize",
    "sym_outer",
    "contract",
    "vec_power",
    "eval_power",
    "canonical_indices",
    "DimensionMismatchError",
]


class DimensionMismatchError(ValueError):
    """Operands live over different coordinate spaces (or invalid orders)."""


def canonical_indices(order: int, dim: int):
    """All non-decreasing index tuples of the given length over {0..dim-1}."""
    return combinations_with_replacement(range(dim), order)


def _perm_count(idx: tuple) -> int:
    """Number of distinct orderings of a multi-index."""
    n = math.factorial(len(idx))
    for c in Counter(idx).values():
        n //= math.factorial(c)
    return n


def _merge_weight(target: Counter, part: Counter) -> int:
    """Number of position subsets of `target` realizing the sub-multiset `part`."""
    w = 1
    for v, c in part.items():
        w *= math.comb(target[v], c)
    return w


@dataclass
class SymTensor:
    """Sparse symmetric tensor: canonical multi-index -> complex coefficient."""

    order: int
    dim: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 0:
            raise DimensionMismatchError(f"negative tensor order {self.order}")
        if self.dim < 1:
            raise DimensionMismatchError(f"non-positive dimension {self.dim}")

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, order: int, dim: int) -> "SymTensor":
        return cls(order, dim, {})

    @classmethod
    def scalar(cls, value: complex, dim: int) -> "SymTensor":
        return cls(0, dim, {(): complex(value)} if value != 0 else {})

    @classmethod
    def vector(cls, v) -> "SymTensor":
        v = np.asarray(v, dtype=complex)
        return cls(1, v.shape[0], {(i,): v[i] for i in range(v.shape[0]) if v[i] != 0})

    @classmethod
    def from_matrix(cls, a) -> "SymTensor":
        """Order-2 tensor from a (symmetric) matrix; symmetrizes if needed."""
        a = np.asarray(a, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError("from_matrix needs a square matrix")
        d = a.shape[0]
        out = {}
        for i in range(d):
            for j in range(i, d):
                val = (a[i, j] + a[j, i]) / 2.0
                if val != 0:
                    out[(i, j)] = val
        return cls(2, d, out)

    # -- element access ------------------------------------------------------

    def __getitem__(self, idx) -> complex:
        if isinstance(idx, (int, np.integer)):
            idx = (int(idx),)
        key = tuple(sorted(int(i) for i in idx))
        if len(key) != self.order:
            raise DimensionMismatchError(
                f"index length {len(key)} != tensor order {self.order}")
        if any(i < 0 or i >= self.dim for i in key):
            raise DimensionMismatchError(f"index {key} out of range for dim {self.dim}")
        return self.coeffs.get(key, 0j)

    def _set(self, key: tuple, value: complex):
        if value == 0:
            self.coeffs.pop(key, None)
        else:
            self.coeffs[key] = value

    @property
    def value(self) -> complex:
        """Scalar payload of an order-0 tensor."""
        if self.order != 0:
            raise DimensionMismatchError("value is only defined for order-0 tensors")
        return self.coeffs.get((), 0j)

    # -- linear structure ----------------------------------------------------

    def copy(self) -> "SymTensor":
        return SymTensor(self.order, self.dim, dict(self.coeffs))

    def __add__(self, other: "SymTensor") -> "SymTensor":
        self._check_same_shape(other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0j) + v
        return SymTensor(self.order, self.dim, {k: v for k, v in out.items() if v != 0})

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        return self + (other * (-1))

    def __mul__(self, scalar: complex) -> "SymTensor":
        s = complex(scalar)
        if s == 0:
            return SymTensor.zero(self.order, self.dim)
        return SymTensor(self.order, self.dim, {k: v * s for k, v in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "SymTensor":
        return self * (-1)

    def _check_same_shape(self, other: "SymTensor"):
        if self.dim != other.dim:
            raise DimensionMismatchError(f"dim mismatch: {self.dim} vs {other.dim}")
        if self.order != other.order:
            raise DimensionMismatchError(
                f"order mismatch: {self.order} vs {other.order}")

    # -- norms / dense view ---------------------------------------------------

    def norm_inf(self) -> float:
        return max((abs(v) for v in self.coeffs.values()), default=0.0)

    def to_dense(self) -> np.ndarray:
        """Full dense array (every index permutation filled)."""
        arr = np.zeros((self.dim,) * self.order, dtype=complex)
        if self.order == 0:
            return np.asarray(self.value)
        for key, v in self.coeffs.items():
            seen = set()
            for perm in _permutations_unique(key):
                if perm not in seen:
                    arr[perm] = v
                    seen.add(perm)
        return arr

    def real_part(self) -> "SymTensor":
        return SymTensor(self.order, self.dim,
                         {k: complex(v.real) for k, v in self.coeffs.items() if v.real != 0})

    def max_imag(self) -> float:
        return max((abs(v.imag) for v in self.coeffs.values()), default=0.0)

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        entries = [[[i + 1 for i in k], v.real, v.imag]
                   for k, v in sorted(self.coeffs.items())]
        return json.dumps({"order": self.order, "dim": self.dim, "entries": entries})

    @classmethod
    def from_json(cls, text: str) -> "SymTensor":
        obj = json.loads(text)
        coeffs = {}
        for raw, re, im in obj["entries"]:
            key = tuple(sorted(int(i) - 1 for i in raw))
            coeffs[key] = complex(re, im)
        return cls(int(obj["order"]), int(obj["dim"]), coeffs)

    def __repr__(self):
        return f"SymTensor(order={self.order}, dim={self.dim}, nnz={len(self.coeffs)})"


def _permutations_unique(key: tuple):
    from itertools import permutations
    return permutations(key)


# -- core operations ----------------------------------------------------------

def symmetrize(raw) -> SymTensor:
    """Canonicalize an arbitrary dense array into a symmetric form.

    The coefficient at a canonical index is the average of the raw array over
    all orderings of that index.
    """
    arr = np.asarray(raw, dtype=complex)
    order = arr.ndim
    if order == 0:
        return SymTensor.scalar(complex(arr), 1)
    dim = arr.shape[0]
    if any(s != dim for s in arr.shape):
        raise DimensionMismatchError(f"axes have unequal extents {arr.shape}")
    out = {}
    from itertools import permutations
    for key in canonical_indices(order, dim):
        vals = [arr[p] for p in set(permutations(key))]
        mean = sum(vals) / len(vals)
        if mean != 0:
            out[key] = mean
    return SymTensor(order, dim, out)


def sym_outer(a: SymTensor, b: SymTensor) -> SymTensor:
    """Symmetrized product: order m and k in, order m+k out.

    Entry at a canonical index L equals the average over all ways of routing
    the positions of L to the two factors; computed by multiset splits with
    binomial weights instead of summing (m+k)! permutations.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dim mismatch: {a.dim} vs {b.dim}")
    m, k = a.order, b.order
    total = math.comb(m + k, m)
    out: dict = {}
    for ia, va in a.coeffs.items():
        ca = Counter(ia)
        for ib, vb in b.coeffs.items():
            key = tuple(sorted(ia + ib))
            w = _merge_weight(Counter(key), ca)
            contrib = va * vb * (w / total)
            if key in out:
                out[key] += contrib
            else:
                out[key] = contrib
    return SymTensor(m + k, a.dim, {k_: v for k_, v in out.items() if v != 0})


def contract(a: SymTensor, b: SymTensor) -> SymTensor:
    """Partial contraction of the last k slots of an order-m form (k <= m).

    The sum runs over *all* index tuples of the contracted slots, which for
    canonical storage means weighting each stored entry of ``b`` by the number
    of orderings of its index.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dim mismatch: {a.dim} vs {b.dim}")
    m, k = a.order, b.order
    if k > m:
        raise DimensionMismatchError(f"cannot contract order {m} against order {k}")
    if k == 0:
        return a * b.value if b.coeffs else SymTensor.zero(m, a.dim)
    weights = {ib: _perm_count(ib) * vb for ib, vb in b.coeffs.items()}
    out: dict = {}
    for key in canonical_indices(m - k, a.dim):
        acc = 0j
        for ib, wvb in weights.items():
            full = tuple(sorted(key + ib))
            va = a.coeffs.get(full)
            if va is not None:
                acc += va * wvb
        if acc != 0:
            out[key] = acc
    return SymTensor(m - k, a.dim, out)


def vec_power(s, k: int) -> SymTensor:
    """Rank-one power: entry at (i_1..i_k) is the product of the s_i."""
    s = np.asarray(s, dtype=complex)
    if k < 0:
        raise DimensionMismatchError("negative power order")
    dim = s.shape[0]
    if k == 0:
        return SymTensor.scalar(1.0, dim)
    out = {}
    for key in canonical_indices(k, dim):
        v = complex(np.prod([s[i] for i in key]))
        if v != 0:
            out[key] = v
    return SymTensor(k, dim, out)


def eval_power(a: SymTensor, s) -> complex:
    """Full evaluation a * s^{x m} as a scalar."""
    s = np.asarray(s, dtype=complex)
    if s.shape[0] != a.dim:
        raise DimensionMismatchError(f"vector dim {s.shape[0]} != tensor dim {a.dim}")
    acc = 0j
    for key, v in a.coeffs.items():
        acc += v * _perm_count(key) * complex(np.prod([s[i] for i in key]))
    return acc
