"""Structural model tests: basis order, h round trips, unit Jacobian,
environment sufficiency, the constant-coefficient counterexample, and
scm-v1 serialization."""

import json

import numpy as np
import pytest

from polycause import families as fam
from polycause.errors import (InsufficientEnvironmentsError, NotApplicableError,
                              SchemaVersionError, ValidationError)
from polycause.monomials import (basis_size, exponent_tuples, format_monomial,
                                 monomial_basis, monomial_basis_batch,
                                 prefix_index)
from polycause.scm import (Scm, construct_counterexample, env_sufficiency_check,
                           jacobian_det_h, scm_from_text, scm_to_text,
                           structural_forward, structural_inverse,
                           true_adjacency)

from helpers import TAME_NOISE_BOXES, chain_scm, draw_noise_rows, random_scm


# ---------------------------------------------------------------------------
# monomial basis

def test_basis_pinned_order_two_vars():
    assert exponent_tuples(2, 2) == ((1, 0), (0, 1), (2, 0), (0, 2), (1, 1))
    got = monomial_basis(np.array([2.0, 3.0]), 2)
    assert np.array_equal(got, [2.0, 3.0, 4.0, 9.0, 6.0])


def test_basis_single_variable_degree_one():
    assert exponent_tuples(1, 1) == ((1,),)
    assert np.array_equal(monomial_basis(np.array([5.0]), 1), [5.0])


def test_basis_three_vars_degree_two_enumeration():
    expts = exponent_tuples(3, 2)
    assert len(expts) == 9 == basis_size(3, 2)
    # Exactly the distinct monomials of degree 1 and 2, no repeats.
    assert len(set(expts)) == 9
    assert all(1 <= sum(e) <= 2 for e in expts)
    linear = [e for e in expts if sum(e) == 1]
    assert linear == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]


def test_basis_length_formula():
    for k in range(0, 7):
        for d in range(1, 5):
            expts = exponent_tuples(k, d)
            assert len(expts) == basis_size(k, d)
            assert len(set(expts)) == len(expts)


def test_basis_empty_prefix():
    assert monomial_basis(np.array([]), 3).shape == (0,)
    assert basis_size(0, 3) == 0


def test_basis_batch_matches_pointwise():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(40, 4))
    batch = monomial_basis_batch(z, 3)
    for r in range(0, 40, 7):
        assert np.array_equal(batch[r], monomial_basis(z[r], 3))


def test_prefix_index_round_trip():
    for k, d in [(2, 2), (4, 3)]:
        for idx, e in enumerate(exponent_tuples(k, d)):
            assert prefix_index(e, k, d) == idx
    with pytest.raises(ValueError):
        prefix_index((9, 9), 2, 2)


def test_format_monomial():
    assert format_monomial((1, 0)) == "z1"
    assert format_monomial((1, 2)) == "z1*z2^2"
    assert format_monomial((0, 0)) == "1"


# ---------------------------------------------------------------------------
# structural forward / inverse

def test_forward_linear_chain_pinned():
    scm = chain_scm([0.7], envs=2)
    z = structural_forward(scm, np.array([1.0, 0.5]), 0)
    assert np.array_equal(z, [1.0, 0.7 * 1.0 + 0.5])


def test_forward_zero_coefficients_is_identity():
    scm = chain_scm([0.0, 0.0], envs=2)
    n = np.array([0.3, -1.1, 2.0])
    assert np.array_equal(structural_forward(scm, n, 1), n)
    assert np.array_equal(structural_inverse(scm, n, 1), n)


def test_inverse_linear_chain_pinned():
    scm = chain_scm([0.7], envs=2)
    n = structural_inverse(scm, np.array([1.0, 1.2]), 0)
    assert abs(n[0] - 1.0) == 0.0
    assert abs(n[1] - 0.5) < 1e-15


def test_forward_shape_and_env_validation():
    scm = chain_scm([0.7], envs=2)
    with pytest.raises(ValidationError):
        structural_forward(scm, np.zeros(3), 0)
    with pytest.raises(ValidationError):
        structural_forward(scm, np.zeros(2), 5)


def _random_triples(count, seed):
    """(scm, n, u) triples with trajectories kept in a moderate box."""
    rng = np.random.default_rng(seed)
    families = list(TAME_NOISE_BOXES)
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        ell = int(rng.integers(1, 7))
        degree = int(rng.integers(1, 4))
        family = families[attempts % len(families)]
        scm = random_scm(rng, ell, degree, family, envs=int(rng.integers(2, 6)))
        u = int(rng.integers(0, scm.envs))
        n = draw_noise_rows(scm, rng, 1, u)[0]
        z = structural_forward(scm, n, u)
        if np.max(np.abs(z)) < 100.0:
            out.append((scm, n, u, z))
    assert attempts < count * 3, "trajectory rejection rate unexpectedly high"
    return out


def test_round_trip_thousand_triples():
    worst = 0.0
    for scm, n, u, z in _random_triples(1000, seed=77):
        back = structural_inverse(scm, z, u)
        worst = max(worst, float(np.max(np.abs(back - n))))
    assert worst < 1e-12


def test_forward_batch_consistent_with_rows():
    rng = np.random.default_rng(8)
    scm = random_scm(rng, 4, 2, "gaussian", envs=3)
    n = rng.normal(size=(20, 4))
    batch = structural_forward(scm, n, 2)
    rows = np.stack([structural_forward(scm, n[r], 2) for r in range(20)])
    # batch and single-row matmuls may take different BLAS paths, so this
    # is a closeness check, not bit equality
    assert np.max(np.abs(batch - rows)) < 1e-12


# ---------------------------------------------------------------------------
# symbolic composition oracle

def _poly_add(a, b):
    out = dict(a)
    for e, c in b.items():
        out[e] = out.get(e, 0.0) + c
    return out


def _poly_mul(a, b):
    out = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return out


def _compose_in_noise(scm, u):
    """Each z_i as an explicit polynomial over (n_1..n_ell), built by
    direct substitution, sharing nothing with the forward evaluator."""
    ell = scm.ell
    zero = tuple([0] * ell)
    zpolys = []
    for i in range(ell):
        unit = [0] * ell
        unit[i] = 1
        acc = {tuple(unit): 1.0}
        for slot, e in enumerate(exponent_tuples(i, scm.degree)):
            lam = float(scm.coeffs[i][u, slot])
            if lam == 0.0:
                continue
            term = {zero: lam}
            for j, p in enumerate(e):
                for _ in range(p):
                    term = _poly_mul(term, zpolys[j])
            acc = _poly_add(acc, term)
        zpolys.append(acc)
    return zpolys


def _poly_eval(poly, n):
    total = 0.0
    for e, c in poly.items():
        v = c
        for j, p in enumerate(e):
            for _ in range(p):
                v *= n[j]
        total += v
    return total


def test_symbolic_composition_oracle():
    rng = np.random.default_rng(41)
    for trial in range(5):
        scm = random_scm(rng, 4, 3, "gaussian", envs=3)
        u = trial % 3
        zpolys = _compose_in_noise(scm, u)
        for _ in range(10):
            n = rng.uniform(-1.2, 1.2, size=4)
            z = structural_forward(scm, n, u)
            ref = np.array([_poly_eval(zp, n) for zp in zpolys])
            assert np.max(np.abs(z - ref)) < 1e-12


# ---------------------------------------------------------------------------
# Jacobian of h

def test_jacobian_unit_everywhere():
    rng = np.random.default_rng(5150)
    families = list(TAME_NOISE_BOXES)
    worst = 0.0
    for trial in range(20):
        ell = int(rng.integers(2, 6))
        degree = int(rng.integers(1, 4))
        scm = random_scm(rng, ell, degree, families[trial % 5], envs=3)
        done = 0
        while done < 50:
            u = int(rng.integers(0, 3))
            n = draw_noise_rows(scm, rng, 1, u)[0]
            if np.max(np.abs(structural_forward(scm, n, u))) > 100.0:
                continue
            worst = max(worst, abs(jacobian_det_h(scm, n, u) - 1.0))
            done += 1
    assert worst < 1e-5


def test_jacobian_identity_map_exact():
    scm = chain_scm([0.0], envs=2)
    assert jacobian_det_h(scm, np.array([0.4, -2.0]), 0) == 1.0


def test_jacobian_large_poly_scm():
    rng = np.random.default_rng(99)
    scm = random_scm(rng, 5, 3, "gaussian", envs=4)
    for _ in range(50):
        n = rng.uniform(-1.5, 1.5, size=5)
        u = int(rng.integers(0, 4))
        assert abs(jacobian_det_h(scm, n, u) - 1.0) < 1e-5


# ---------------------------------------------------------------------------
# environment sufficiency

def _boxed_scm(rng, ell, envs, family="beta"):
    p1 = np.empty((ell, envs))
    p2 = np.empty((ell, envs))
    for i in range(ell):
        for u in range(envs):
            p1[i, u], p2[i, u] = TAME_NOISE_BOXES[family](rng)
    coeffs = tuple(np.zeros((envs, basis_size(i, 1))) for i in range(ell))
    return Scm(ell=ell, degree=1, envs=envs, family=family,
               noise_p1=p1, noise_p2=p2, coeffs=coeffs)


def test_env_sufficiency_minimal_count_passes():
    rng = np.random.default_rng(12)
    scm = _boxed_scm(rng, 3, envs=7)
    report = env_sufficiency_check(scm)
    assert report.passed
    assert report.sigma_min > 1e-6
    assert report.required == 7
    assert report.subset == tuple(range(7))


def test_env_sufficiency_identical_envs_fail():
    p1 = np.full((2, 5), 1.3)
    p2 = np.full((2, 5), 0.8)
    coeffs = (np.zeros((5, 0)), np.zeros((5, 1)))
    scm = Scm(ell=2, degree=1, envs=5, family="gamma",
              noise_p1=p1, noise_p2=p2, coeffs=coeffs)
    report = env_sufficiency_check(scm)
    assert not report.passed
    assert report.sigma_min == 0.0


def test_env_sufficiency_too_few_envs():
    rng = np.random.default_rng(2)
    scm = _boxed_scm(rng, 4, envs=3)
    with pytest.raises(InsufficientEnvironmentsError):
        env_sufficiency_check(scm)


def test_env_sufficiency_subset_search():
    rng = np.random.default_rng(7)
    scm = _boxed_scm(rng, 4, envs=30)
    report = env_sufficiency_check(scm)
    assert report.passed
    assert len(report.subset) == 9
    assert report.subset[0] == 0
    assert all(0 <= u < 30 for u in report.subset)


# ---------------------------------------------------------------------------
# counterexample construction

def test_counterexample_linear_chain():
    # z2 = 0.8 z1 + n2 with the weight shared by every environment.
    scm = chain_scm([0.8], envs=4, family="gaussian")
    alt, witness = construct_counterexample(scm, node=1, monomial=0)
    assert np.all(alt.coeffs[1] == 0.0)
    assert witness.lam == 0.8
    assert witness.to_dict()["monomial"] == "z1"

    rng = np.random.default_rng(10)
    n = rng.normal(size=(2000, 2))
    for u in range(4):
        z = structural_forward(scm, n, u)
        zp = structural_forward(alt, n, u)
        assert np.array_equal(zp, n)
        assert np.max(np.abs(witness.apply(zp) - z)) < 1e-12
        r = np.corrcoef(z[:, 1], zp[:, 1])[0, 1]
        assert r < 0.999


def test_counterexample_requires_constancy():
    rng = np.random.default_rng(21)
    scm = random_scm(rng, 3, 2, "gaussian", envs=4)
    with pytest.raises(NotApplicableError):
        construct_counterexample(scm, node=1, monomial=0)


def test_counterexample_descendant_recomposition():
    # g2 = 0.6 z1^2 (frozen), g3 mixes z2^2 and z1 z2 with varying weights.
    envs = 4
    rng = np.random.default_rng(33)
    node2 = np.zeros((envs, basis_size(1, 2)))
    node2[:, prefix_index((2,), 1, 2)] = 0.6
    node3 = np.zeros((envs, basis_size(2, 2)))
    node3[:, prefix_index((0, 2), 2, 2)] = rng.uniform(0.5, 1.0, envs)
    node3[:, prefix_index((1, 1), 2, 2)] = rng.uniform(-1.0, -0.5, envs)
    scm = Scm(ell=3, degree=2, envs=envs, family="gaussian",
              noise_p1=np.zeros((3, envs)), noise_p2=np.ones((3, envs)),
              coeffs=(np.zeros((envs, 0)), node2, node3))

    alt, witness = construct_counterexample(scm, node=1, monomial=prefix_index((2,), 1, 2))
    assert alt.degree == 4  # substitution doubles the degree of g3's z2^2 term

    n = rng.normal(size=(1000, 3))
    worst = 0.0
    for u in range(envs):
        z = structural_forward(scm, n, u)
        zp = structural_forward(alt, n, u)
        worst = max(worst, float(np.max(np.abs(witness.apply(zp) - z))))
        # the rewritten node carries no history of z1 beyond its own noise
        assert np.array_equal(zp[:, 1], n[:, 1])
    assert worst < 1e-9


def test_witness_unit_jacobian():
    scm = chain_scm([0.8], envs=2)
    _, witness = construct_counterexample(scm, node=1, monomial=0)
    h = 1e-5
    point = np.array([0.3, -0.7])
    jac = np.empty((2, 2))
    for j in range(2):
        hi, lo = point.copy(), point.copy()
        hi[j] += h
        lo[j] -= h
        jac[:, j] = (witness.apply(hi) - witness.apply(lo)) / (2 * h)
    assert abs(np.linalg.det(jac) - 1.0) < 1e-8


def test_counterexample_index_validation():
    scm = chain_scm([0.8], envs=2)
    with pytest.raises(ValidationError):
        construct_counterexample(scm, node=5, monomial=0)
    with pytest.raises(ValidationError):
        construct_counterexample(scm, node=1, monomial=3)


# ---------------------------------------------------------------------------
# adjacency

def test_true_adjacency_a5_chain_shape():
    # z1 -> z2 -> z3 -> z4 plus z3 -> z5
    envs = 3
    coeffs = [np.zeros((envs, 0))]
    for i in range(1, 5):
        tab = np.zeros((envs, basis_size(i, 1)))
        parent = i - 1 if i < 4 else 2
        tab[:, parent] = 0.9
        coeffs.append(tab)
    scm = Scm(ell=5, degree=1, envs=envs, family="gaussian",
              noise_p1=np.zeros((5, envs)), noise_p2=np.ones((5, envs)),
              coeffs=tuple(coeffs))
    adj = true_adjacency(scm)
    expected = np.zeros((5, 5), dtype=bool)
    expected[0, 1] = expected[1, 2] = expected[2, 3] = expected[2, 4] = True
    assert np.array_equal(adj, expected)


def test_true_adjacency_zero_and_poly():
    envs = 2
    scm = chain_scm([0.0, 0.0], envs=envs)
    assert not true_adjacency(scm).any()

    # node 4 driven by the product z2 z3: both are parents
    coeffs = [np.zeros((envs, 0)), np.zeros((envs, basis_size(1, 2))),
              np.zeros((envs, basis_size(2, 2)))]
    tab = np.zeros((envs, basis_size(3, 2)))
    tab[:, prefix_index((0, 1, 1), 3, 2)] = 0.7
    coeffs.append(tab)
    scm = Scm(ell=4, degree=2, envs=envs, family="gaussian",
              noise_p1=np.zeros((4, envs)), noise_p2=np.ones((4, envs)),
              coeffs=tuple(coeffs))
    adj = true_adjacency(scm)
    assert adj[1, 3] and adj[2, 3]
    assert adj.sum() == 2


# ---------------------------------------------------------------------------
# serialization and validation

def test_scm_text_round_trip():
    rng = np.random.default_rng(6)
    scm = random_scm(rng, 4, 2, "inverse_gamma", envs=5)
    text = scm_to_text(scm)
    back = scm_from_text(text)
    assert back.ell == scm.ell and back.degree == scm.degree
    assert back.envs == scm.envs and back.family == scm.family
    assert np.array_equal(back.noise_p1, scm.noise_p1)
    assert np.array_equal(back.noise_p2, scm.noise_p2)
    for a, b in zip(back.coeffs, scm.coeffs):
        assert np.array_equal(a, b)
    assert scm_to_text(back) == text


def test_scm_text_rejects_garbage_and_versions():
    with pytest.raises(ValidationError):
        scm_from_text("{not json")
    doc = json.loads(scm_to_text(chain_scm([0.5], envs=2)))
    doc["schema"] = "scm-v9"
    with pytest.raises(SchemaVersionError):
        scm_from_text(json.dumps(doc))
    doc["schema"] = "scm-v1"
    del doc["coeffs"]
    with pytest.raises(ValidationError):
        scm_from_text(json.dumps(doc))


def test_scm_validation():
    with pytest.raises(ValidationError):
        Scm(ell=1, degree=0, envs=1, family="gaussian",
            noise_p1=np.zeros((1, 1)), noise_p2=np.ones((1, 1)),
            coeffs=(np.zeros((1, 0)),))
    with pytest.raises(ValidationError):
        Scm(ell=1, degree=1, envs=2, family="gaussian",
            noise_p1=np.zeros((1, 2)), noise_p2=-np.ones((1, 2)),
            coeffs=(np.zeros((2, 0)),))
    with pytest.raises(ValidationError):
        Scm(ell=2, degree=1, envs=2, family="gaussian",
            noise_p1=np.zeros((2, 2)), noise_p2=np.ones((2, 2)),
            coeffs=(np.zeros((2, 0)), np.zeros((2, 5))))


def test_scm_arrays_frozen():
    scm = chain_scm([0.5], envs=2)
    with pytest.raises(ValueError):
        scm.coeffs[1][0, 0] = 9.0
    with pytest.raises(ValueError):
        scm.noise_p1[0, 0] = 9.0
