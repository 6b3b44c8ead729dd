"""Evaluation metrics: Pearson correlation, matched mean correlation,
adjacency extraction from coefficient tables, and structural Hamming
distance.

Latents are only ever recovered up to permutation, sign and scale, so the
headline number (MPC) solves an assignment problem over the matrix of
absolute correlations before averaging. The assignment is exhaustive up to
6 nodes and Hungarian above that.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .monomials import exponent_tuples


def pearson(a, b) -> float:
    """Sample correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValidationError(
            f"pearson needs two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValidationError("pearson needs at least 2 points")
    ac = a - a.mean()
    bc = b - b.mean()
    qa = np.sum(ac * ac)
    qb = np.sum(bc * bc)
    if qa == 0.0 or qb == 0.0:
        raise ValidationError("correlation is undefined for a constant input")
    return float(np.sum(ac * bc) / np.sqrt(qa * qb))


@dataclass(frozen=True)
class MpcReport:
    pairing: tuple        # pairing[i] = estimated column matched to true column i
    per_node: tuple       # matched absolute correlations
    mean: float
    signed: tuple         # the same matches with their signs kept
    constant_flags: tuple # true/estimated column pairs degraded by a constant input

    def to_dict(self) -> dict:
        return {"pairing": list(self.pairing), "per_node": list(self.per_node),
                "mean": self.mean, "signed": list(self.signed),
                "constant_flags": list(self.constant_flags)}


def _abs_corr_matrix(z_true: np.ndarray, z_hat: np.ndarray):
    tc = z_true - z_true.mean(axis=0)
    hc = z_hat - z_hat.mean(axis=0)
    tn = np.sqrt(np.sum(tc * tc, axis=0))
    hn = np.sqrt(np.sum(hc * hc, axis=0))
    flags = []
    corr = tc.T @ hc
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = corr / np.outer(tn, hn)
    bad = (tn == 0.0)[:, None] | (hn == 0.0)[None, :]
    if np.any(bad):
        corr[bad] = 0.0
        flags = [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]
    return corr, flags


def mpc(z_true, z_hat) -> MpcReport:
    """Mean matched absolute Pearson correlation between two latent sets.

    Columns are matched by maximizing the total absolute correlation;
    constant columns score 0 against everything and are flagged.
    """
    z_true = np.asarray(z_true, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_true.ndim != 2 or z_true.shape != z_hat.shape:
        raise ValidationError(
            f"mpc needs matching (N, ell) arrays, got {z_true.shape} "
            f"and {z_hat.shape}")
    if z_true.shape[0] < 3:
        raise ValidationError("mpc needs at least 3 rows")
    ell = z_true.shape[1]
    corr, flags = _abs_corr_matrix(z_true, z_hat)
    acorr = np.abs(corr)
    if ell <= 6:
        best, best_perm = -1.0, None
        for perm in permutations(range(ell)):
            total = sum(acorr[i, perm[i]] for i in range(ell))
            if total > best:
                best, best_perm = total, perm
        pairing = best_perm
    else:
        rows, cols = linear_sum_assignment(-acorr)
        pairing = tuple(int(cols[np.where(rows == i)[0][0]]) for i in range(ell))
    per_node = tuple(float(acorr[i, pairing[i]]) for i in range(ell))
    signed = tuple(float(corr[i, pairing[i]]) for i in range(ell))
    return MpcReport(pairing=tuple(int(p) for p in pairing), per_node=per_node,
                     mean=float(np.mean(per_node)), signed=signed,
                     constant_flags=tuple(flags))


def extract_adjacency(tables, degree: int, tau: float = 0.1) -> np.ndarray:
    """Read a graph out of per-node coefficient tables.

    tables[i] is the (envs, basis_size(i, degree)) coefficient table of
    node i. Edge z_j -> z_i exists when the per-environment max |coefficient|
    over monomials containing z_j, averaged over environments, exceeds tau.
    """
    ell = len(tables)
    adj = np.zeros((ell, ell), dtype=bool)
    for i, tab in enumerate(tables):
        tab = np.asarray(tab, dtype=np.float64)
        expts = exponent_tuples(i, degree)
        if tab.ndim != 2 or tab.shape[1] != len(expts):
            raise ValidationError(
                f"node {i + 1} table has {tab.shape} but the degree-{degree} "
                f"prefix basis has {len(expts)} monomials")
        for j in range(i):
            slots = [s for s, e in enumerate(expts) if e[j] > 0]
            if not slots:
                continue
            score = np.abs(tab[:, slots]).max(axis=1).mean()
            if score > tau:
                adj[j, i] = True
    return adj


@dataclass(frozen=True)
class ShdReport:
    shd: int
    additions: int
    deletions: int
    reversals: int
    tau: float = None

    def to_dict(self) -> dict:
        return {"shd": self.shd, "additions": self.additions,
                "deletions": self.deletions, "reversals": self.reversals,
                "tau": self.tau}


def shd(a, b, tau: float = None) -> ShdReport:
    """Structural Hamming distance between two adjacency matrices.

    A pair of opposite edges counts once as a reversal; with the shared
    causal order both inputs are strictly lower triangular and reversals
    are always zero, in which case the count equals the size of the
    symmetric difference of the edge sets.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(
            f"shd needs two equal square matrices, got {a.shape} and {b.shape}")
    only_a = a & ~b
    only_b = b & ~a
    rev = only_a & only_b.T
    reversals = int(rev.sum())
    deletions = int(only_a.sum()) - reversals
    additions = int(only_b.sum()) - reversals
    return ShdReport(shd=additions + deletions + reversals,
                     additions=additions, deletions=deletions,
                     reversals=reversals, tau=tau)
