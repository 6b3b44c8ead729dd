"""Varying polynomial structural causal models over latent variables.

An Scm fixes the causal order z_1, ..., z_ell. Node i is assigned

    z_i := g_i(z_1..z_{i-1}; u) + n_i

where g_i is a polynomial with per-environment coefficients over the
monomial basis of the strict prefix (see monomials.py for the ordering)
and n_i follows one two-parameter exponential family whose parameters
also depend on the environment u.

The noise-to-latent map h: n -> z and its inverse are both polynomial and
lower triangular with unit diagonal, so h is volume preserving. That fact,
the environment sufficiency condition, and the constant-coefficient
counterexample construction all live here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg as _la

from . import families as fam
from .errors import (InsufficientEnvironmentsError, NotApplicableError,
                     SchemaVersionError, ValidationError)
from .monomials import (basis_size, exponent_tuples, format_monomial,
                        monomial_basis_batch, prefix_index)

SCM_SCHEMA = "scm-v1"


@dataclass(frozen=True)
class Scm:
    """One varying polynomial SCM; treat as immutable after construction.

    noise_p1 / noise_p2 are (ell, envs) source-parameter tables for the
    noise family, coeffs[i] is the (envs, basis_size(i, degree)) coefficient
    table of node i over the prefix basis.
    """

    ell: int
    degree: int
    envs: int
    family: str
    noise_p1: np.ndarray
    noise_p2: np.ndarray
    coeffs: tuple

    def __post_init__(self):
        if self.ell < 1:
            raise ValidationError(f"ell must be >= 1, got {self.ell}")
        if self.degree < 1:
            raise ValidationError(f"degree must be >= 1, got {self.degree}")
        if self.envs < 1:
            raise ValidationError(f"envs must be >= 1, got {self.envs}")
        p1 = np.array(self.noise_p1, dtype=np.float64)
        p2 = np.array(self.noise_p2, dtype=np.float64)
        if p1.shape != (self.ell, self.envs) or p2.shape != (self.ell, self.envs):
            raise ValidationError(
                f"noise tables must be shaped ({self.ell}, {self.envs}), "
                f"got {p1.shape} and {p2.shape}")
        for i in range(self.ell):
            for u in range(self.envs):
                # Constructing the params object runs the family checks.
                fam.ExpFamParams(self.family, p1[i, u], p2[i, u])
        if len(self.coeffs) != self.ell:
            raise ValidationError(
                f"expected {self.ell} coefficient tables, got {len(self.coeffs)}")
        tables = []
        for i, tab in enumerate(self.coeffs):
            tab = np.array(tab, dtype=np.float64)
            want = (self.envs, basis_size(i, self.degree))
            if tab.shape != want:
                raise ValidationError(
                    f"node {i + 1} coefficient table must be shaped {want}, "
                    f"got {tab.shape}")
            if not np.all(np.isfinite(tab)):
                raise ValidationError(f"node {i + 1} coefficients contain non-finite values")
            tab.flags.writeable = False
            tables.append(tab)
        p1.flags.writeable = False
        p2.flags.writeable = False
        object.__setattr__(self, "noise_p1", p1)
        object.__setattr__(self, "noise_p2", p2)
        object.__setattr__(self, "coeffs", tuple(tables))

    def noise_params(self, i: int, u: int) -> fam.ExpFamParams:
        return fam.ExpFamParams(self.family, self.noise_p1[i, u], self.noise_p2[i, u])


def _check_point(scm: Scm, v, u: int):
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != scm.ell:
        raise ValidationError(
            f"expected {scm.ell} columns, got array of shape {np.shape(v)}")
    if not 0 <= u < scm.envs:
        raise ValidationError(f"environment index {u} out of range [0, {scm.envs})")
    return v, squeeze


def structural_forward(scm: Scm, n, u: int) -> np.ndarray:
    """Map noise to latents in causal order: z_i = g_i(z_{<i}; u) + n_i.

    Accepts a single length-ell vector or an (N, ell) batch.
    """
    n, squeeze = _check_point(scm, n, u)
    z = np.empty_like(n)
    for i in range(scm.ell):
        z[:, i] = n[:, i]
        if scm.coeffs[i].shape[1]:
            feats = monomial_basis_batch(z[:, :i], scm.degree)
            z[:, i] += feats @ scm.coeffs[i][u]
    return z[0] if squeeze else z


def structural_inverse(scm: Scm, z, u: int) -> np.ndarray:
    """Recover noise from latents: n_i = z_i - g_i(z_{<i}; u)."""
    z, squeeze = _check_point(scm, z, u)
    n = np.empty_like(z)
    for i in range(scm.ell):
        n[:, i] = z[:, i]
        if scm.coeffs[i].shape[1]:
            feats = monomial_basis_batch(z[:, :i], scm.degree)
            n[:, i] -= feats @ scm.coeffs[i][u]
    return n[0] if squeeze else n


def jacobian_det_h(scm: Scm, n, u: int, step: float = 1e-4) -> float:
    """Numeric determinant of dh/dn at n, by central differences.

    The map is lower triangular with unit diagonal, so the answer is 1 up
    to finite-difference error; this exists as an independent check, not a
    shortcut through that structure.
    """
    n = np.asarray(n, dtype=np.float64)
    jac = np.empty((scm.ell, scm.ell))
    for j in range(scm.ell):
        h = step * (1.0 + abs(n[j]))
        hi = n.copy()
        lo = n.copy()
        hi[j] += h
        lo[j] -= h
        # dividing by the realized width, not 2h, removes the rounding of
        # n_j +/- h from the quotient
        jac[:, j] = (structural_forward(scm, hi, u)
                     - structural_forward(scm, lo, u)) / (hi[j] - lo[j])
    return float(np.linalg.det(jac))


@dataclass(frozen=True)
class EnvSufficiencyReport:
    passed: bool
    sigma_min: float
    threshold: float
    required: int
    subset: tuple

    def to_dict(self) -> dict:
        return {"passed": self.passed, "sigma_min": self.sigma_min,
                "threshold": self.threshold, "required": self.required,
                "subset": list(self.subset)}


def env_sufficiency_check(scm: Scm, threshold: float = 1e-6) -> EnvSufficiencyReport:
    """Test whether the environments are varied enough for identification.

    Builds the 2*ell x 2*ell matrix of natural-parameter differences against
    a base environment and reports its smallest singular value. With more
    than 2*ell+1 environments the subset is chosen greedily by QR column
    pivoting, so a pass is a certificate while a fail is only evidence.
    """
    required = 2 * scm.ell + 1
    if scm.envs < required:
        raise InsufficientEnvironmentsError(
            f"need at least {required} environments for ell={scm.ell}, "
            f"have {scm.envs}")
    eta = np.empty((2 * scm.ell, scm.envs))
    for i in range(scm.ell):
        for u in range(scm.envs):
            eta[2 * i, u], eta[2 * i + 1, u] = fam.natural_params(scm.noise_params(i, u))
    diffs = eta[:, 1:] - eta[:, :1]
    if scm.envs == required:
        chosen = np.arange(scm.envs - 1)
    else:
        _, _, piv = _la.qr(diffs, mode="economic", pivoting=True)
        chosen = np.sort(piv[: 2 * scm.ell])
    sigma = np.linalg.svd(diffs[:, chosen], compute_uv=False)
    sigma_min = float(sigma[-1])
    subset = (0,) + tuple(int(c) + 1 for c in chosen)
    return EnvSufficiencyReport(passed=bool(sigma_min > threshold),
                                sigma_min=sigma_min, threshold=threshold,
                                required=required, subset=subset)


@dataclass(frozen=True)
class WitnessMap:
    """The polynomial map M with M(z') = z for a counterexample pair.

    Identity on every coordinate except `node`, where it adds back the
    removed term: M(z')_node = z'_node + lam * phi(z'_{<node}). Lower
    triangular with unit diagonal, hence unit Jacobian determinant.
    """

    ell: int
    node: int
    lam: float
    phi: tuple

    def apply(self, zp) -> np.ndarray:
        zp = np.asarray(zp, dtype=np.float64)
        squeeze = zp.ndim == 1
        if squeeze:
            zp = zp[None, :]
        out = zp.copy()
        term = np.full(zp.shape[0], self.lam)
        for j, p in enumerate(self.phi):
            if p:
                term = term * zp[:, j] ** p
        out[:, self.node] += term
        return out[0] if squeeze else out

    def to_dict(self) -> dict:
        return {"node": self.node + 1, "lambda": self.lam,
                "monomial": format_monomial(self.phi)}


def _poly_dict(scm: Scm, i: int) -> dict:
    """Node i's polynomial as {exponent tuple over its i predecessors: (envs,) coeffs}."""
    out = {}
    expts = exponent_tuples(i, scm.degree)
    for slot, e in enumerate(expts):
        col = scm.coeffs[i][:, slot]
        if np.any(col != 0.0):
            out[e] = col.copy()
    return out


def _poly_pow(base: dict, p: int, width: int) -> dict:
    """Raise a scalar-coefficient polynomial dict to an integer power."""
    acc = {tuple([0] * width): 1.0}
    for _ in range(p):
        nxt = {}
        for ea, ca in acc.items():
            for eb, cb in base.items():
                e = tuple(a + b for a, b in zip(ea, eb))
                nxt[e] = nxt.get(e, 0.0) + ca * cb
        acc = nxt
    return acc


def construct_counterexample(scm: Scm, node: int, monomial: int):
    """Build an observationally indistinguishable alternative SCM.

    Requires the coefficient of `monomial` in node `node` to be constant
    across environments (tolerance 1e-12). The alternative moves that term
    out of the latent z_node and into the returned witness map, with every
    descendant polynomial recomposed exactly, so f(M(z')) reproduces the
    original observations for every shared noise draw.
    """
    if not 0 <= node < scm.ell:
        raise ValidationError(f"node index {node} out of range [0, {scm.ell})")
    width = scm.coeffs[node].shape[1]
    if not 0 <= monomial < width:
        raise ValidationError(
            f"monomial index {monomial} out of range [0, {width}) for node {node + 1}")
    col = scm.coeffs[node][:, monomial]
    if float(col.max() - col.min()) >= 1e-12:
        raise NotApplicableError(
            "counterexample needs a coefficient that is constant across "
            f"environments; node {node + 1} monomial {monomial} varies by "
            f"{float(col.max() - col.min()):.3g}")
    lam = float(col[0])
    phi_short = exponent_tuples(node, scm.degree)[monomial]

    # Node `node` keeps its polynomial minus the removed term; every earlier
    # node is untouched. Descendants get z_node replaced by
    # z'_node + lam * phi, which may raise the total degree, so the new
    # degree is discovered before the tables are laid out.
    polys = {}
    for m in range(scm.ell):
        poly = _poly_dict(scm, m)
        if m == node:
            poly.pop(phi_short, None)
        elif m > node:
            subst = {}
            repl = {_unit(node, m): 1.0}
            if lam != 0.0:
                pad = phi_short + tuple([0] * (m - node))
                repl[pad] = repl.get(pad, 0.0) + lam
            for e, c in poly.items():
                p = e[node]
                if p == 0:
                    _accumulate(subst, e, c)
                    continue
                rest = list(e)
                rest[node] = 0
                for eq, cq in _poly_pow(repl, p, m).items():
                    tot = tuple(a + b for a, b in zip(rest, eq))
                    _accumulate(subst, tot, c * cq)
            poly = {e: c for e, c in subst.items() if np.any(c != 0.0)}
        polys[m] = poly

    new_degree = scm.degree
    for poly in polys.values():
        for e in poly:
            new_degree = max(new_degree, sum(e))
    tables = []
    for m in range(scm.ell):
        tab = np.zeros((scm.envs, basis_size(m, new_degree)))
        for e, c in polys[m].items():
            tab[:, prefix_index(e, m, new_degree)] = c
        tables.append(tab)
    alt = Scm(ell=scm.ell, degree=new_degree, envs=scm.envs, family=scm.family,
              noise_p1=scm.noise_p1.copy(), noise_p2=scm.noise_p2.copy(),
              coeffs=tuple(tables))
    phi_full = phi_short + tuple([0] * (scm.ell - node))
    witness = WitnessMap(ell=scm.ell, node=node, lam=lam, phi=phi_full)
    return alt, witness


def _unit(j: int, width: int) -> tuple:
    e = [0] * width
    e[j] = 1
    return tuple(e)


def _accumulate(poly: dict, e: tuple, c: np.ndarray):
    if e in poly:
        poly[e] = poly[e] + c
    else:
        poly[e] = np.array(c, dtype=np.float64)


def true_adjacency(scm: Scm) -> np.ndarray:
    """Boolean (ell, ell) matrix, entry (j, i) true iff z_j -> z_i.

    An edge exists when any monomial of g_i involving z_j carries a nonzero
    coefficient in at least one environment.
    """
    adj = np.zeros((scm.ell, scm.ell), dtype=bool)
    for i in range(scm.ell):
        expts = exponent_tuples(i, scm.degree)
        for slot, e in enumerate(expts):
            if np.max(np.abs(scm.coeffs[i][:, slot])) > 0.0:
                for j, p in enumerate(e):
                    if p:
                        adj[j, i] = True
    return adj


def scm_to_text(scm: Scm) -> str:
    """Serialize to the scm-v1 JSON document (exact float round trip)."""
    doc = {
        "schema": SCM_SCHEMA,
        "ell": scm.ell,
        "degree": scm.degree,
        "envs": scm.envs,
        "family": scm.family,
        "noise_p1": scm.noise_p1.tolist(),
        "noise_p2": scm.noise_p2.tolist(),
        "coeffs": [tab.tolist() for tab in scm.coeffs],
    }
    return json.dumps(doc, indent=2)


def scm_from_text(text: str) -> Scm:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not a valid scm document: {exc}") from None
    return scm_from_dict(doc)


def scm_from_dict(doc: dict) -> Scm:
    if not isinstance(doc, dict):
        raise ValidationError("scm document must be a JSON object")
    schema = doc.get("schema")
    if schema != SCM_SCHEMA:
        raise SchemaVersionError(
            f"unsupported scm schema {schema!r}, expected {SCM_SCHEMA!r}")
    for key in ("ell", "degree", "envs", "family", "noise_p1", "noise_p2", "coeffs"):
        if key not in doc:
            raise ValidationError(f"scm document is missing field '{key}'")
    envs = int(doc["envs"])
    tables = []
    for t in doc["coeffs"]:
        arr = np.array(t, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(envs, 0)
        tables.append(arr)
    return Scm(ell=int(doc["ell"]), degree=int(doc["degree"]),
               envs=envs, family=str(doc["family"]),
               noise_p1=np.array(doc["noise_p1"], dtype=np.float64),
               noise_p2=np.array(doc["noise_p2"], dtype=np.float64),
               coeffs=tuple(tables))
