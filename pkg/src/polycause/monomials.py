"""Monomial basis enumeration and evaluation.

The basis over variables z_1..z_k at degree d is every distinct monomial of
total degree 1..d. The ordering is fixed and documented here because
coefficient vectors are meaningless without it:

  1. ascending total degree,
  2. within a degree, ascending number of distinct variables,
  3. within that, descending lexicographic exponent tuple.

For k=2, d=2 this yields [z1, z2, z1^2, z2^2, z1*z2].
"""

from functools import lru_cache
from itertools import combinations_with_replacement
from math import comb

import numpy as np


@lru_cache(maxsize=None)
def exponent_tuples(k: int, degree: int) -> tuple:
    """All exponent tuples of the basis over k variables, in basis order.

    Each entry is a length-k tuple of nonnegative ints summing to 1..degree.
    k=0 gives the empty basis.
    """
    if k < 0:
        raise ValueError(f"variable count must be >= 0, got {k}")
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    if k == 0:
        return ()
    out = []
    for total in range(1, degree + 1):
        batch = []
        for picks in combinations_with_replacement(range(k), total):
            e = [0] * k
            for v in picks:
                e[v] += 1
            batch.append(tuple(e))
        batch.sort(key=lambda e: (sum(1 for p in e if p > 0), [-p for p in e]))
        out.extend(batch)
    return tuple(out)


def basis_size(k: int, degree: int) -> int:
    """Number of distinct monomials of degree 1..degree over k variables."""
    if k == 0:
        return 0
    return sum(comb(k + t - 1, t) for t in range(1, degree + 1))


def monomial_basis(prefix: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the basis at a single point z_1..z_k.

    Returns a vector of length basis_size(k, degree); empty prefix gives an
    empty vector.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 1:
        raise ValueError(f"prefix must be 1-d, got shape {prefix.shape}")
    return monomial_basis_batch(prefix[None, :], degree)[0]


def monomial_basis_batch(z: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the basis row-wise on an (N, k) array, giving (N, B)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected an (N, k) array, got shape {z.shape}")
    n, k = z.shape
    expts = exponent_tuples(k, degree)
    if not expts:
        return np.zeros((n, 0), dtype=np.float64)
    # Powers z_j^e are precomputed once per column; each monomial is then a
    # product of at most `degree` of them.
    pows = [None] * k
    maxp = np.max(np.array(expts), axis=0)
    for j in range(k):
        col = [np.ones(n), z[:, j]]
        for _ in range(2, maxp[j] + 1):
            col.append(col[-1] * z[:, j])
        pows[j] = col
    out = np.empty((n, len(expts)), dtype=np.float64)
    for idx, e in enumerate(expts):
        acc = None
        for j, p in enumerate(e):
            if p == 0:
                continue
            acc = pows[j][p] if acc is None else acc * pows[j][p]
        out[:, idx] = acc
    return out


def format_monomial(expt: tuple) -> str:
    """Human-readable form of an exponent tuple, e.g. (1, 2) -> 'z1*z2^2'."""
    parts = []
    for j, p in enumerate(expt):
        if p == 1:
            parts.append(f"z{j + 1}")
        elif p > 1:
            parts.append(f"z{j + 1}^{p}")
    return "*".join(parts) if parts else "1"


def prefix_index(expt: tuple, k: int, degree: int) -> int:
    """Basis index of an exponent tuple within the k-variable basis."""
    lookup = _index_table(k, degree)
    try:
        return lookup[tuple(expt)]
    except KeyError:
        raise ValueError(
            f"{expt} is not a basis monomial for k={k}, degree={degree}"
        ) from None


@lru_cache(maxsize=None)
def _index_table(k: int, degree: int) -> dict:
    return {e: i for i, e in enumerate(exponent_tuples(k, degree))}
