"""Generator tests: mixing bijectivity, recipe structure, A.5 parameter
boxes, dataset determinism, and the CSV + sidecar round trip."""

import json
import os

import numpy as np
import pytest

from polycause import families as fam
from polycause.datasets import (Dataset, generate_dataset, load_dataset,
                                recipe_slots, sample_scm, sample_scm_partial,
                                save_dataset)
from polycause.errors import SchemaVersionError, ValidationError
from polycause.mixing import (MixingFunction, make_mixing, mixing_forward,
                              mixing_from_dict, mixing_inverse, mixing_to_dict)
from polycause.monomials import prefix_index
from polycause.scm import structural_forward, true_adjacency


# ---------------------------------------------------------------------------
# mixing

def test_mixing_round_trip():
    rng = np.random.default_rng(4)
    mix = make_mixing(rng, ell=5, layers=3)
    z = rng.normal(size=(1000, 5))
    back = mixing_inverse(mix, mixing_forward(mix, z))
    assert np.max(np.abs(back - z)) < 1e-9


def test_mixing_identity_single_layer():
    mix = MixingFunction(weights=(np.eye(3),), biases=(np.zeros(3),),
                         slope=0.2, sigma_eps=0.0)
    z = np.array([0.4, -1.0, 2.5])
    assert np.array_equal(mixing_forward(mix, z), z)


def test_mixing_condition_invariant_holds():
    rng = np.random.default_rng(11)
    for _ in range(10):
        mix = make_mixing(rng, ell=4, layers=3)
        for w in mix.weights:
            assert np.linalg.cond(w) < 100.0


def test_mixing_rejects_bad_layers():
    ill = np.eye(2)
    ill[1, 1] = 1e-9  # condition number ~1e9
    with pytest.raises(ValidationError):
        MixingFunction(weights=(ill,), biases=(np.zeros(2),),
                       slope=0.2, sigma_eps=0.0)
    with pytest.raises(ValidationError):
        MixingFunction(weights=(np.eye(2),), biases=(np.zeros(2),),
                       slope=1.5, sigma_eps=0.0)


def test_mixing_jacobian_nonsingular():
    rng = np.random.default_rng(6)
    mix = make_mixing(rng, ell=3, layers=3)
    h = 1e-6
    for _ in range(100):
        p = rng.normal(size=3)
        jac = np.empty((3, 3))
        for j in range(3):
            hi, lo = p.copy(), p.copy()
            hi[j] += h
            lo[j] -= h
            jac[:, j] = (mixing_forward(mix, hi) - mixing_forward(mix, lo)) / (2 * h)
        assert abs(np.linalg.det(jac)) > 1e-8


def test_mixing_dict_round_trip():
    rng = np.random.default_rng(8)
    mix = make_mixing(rng, ell=4, layers=2, sigma_eps=0.03)
    back = mixing_from_dict(mixing_to_dict(mix))
    for a, b in zip(back.weights, mix.weights):
        assert np.array_equal(a, b)
    assert back.slope == mix.slope and back.sigma_eps == mix.sigma_eps


# ---------------------------------------------------------------------------
# recipes

def test_linear_chain_recipe_five_nodes():
    slots = recipe_slots("linear-chain", 5, 1)
    assert slots == [(1, (1,)), (2, (0, 1)), (3, (0, 0, 1)), (4, (0, 0, 1, 0))]


def test_linear_chain_recipe_small():
    assert recipe_slots("linear-chain", 2, 1) == [(1, (1,))]
    assert recipe_slots("linear-chain", 4, 1) == [(1, (1,)), (2, (0, 1)), (3, (0, 0, 1))]


def test_poly_recipe_matches_contract():
    slots = recipe_slots("poly-a5", 5, 2)
    assert (1, (2,)) in slots            # z2 driven by z1^2
    assert (3, (0, 1, 1)) in slots       # z4 driven by z2 z3
    assert (4, (0, 0, 2, 0)) in slots    # z5 driven by z3^2
    with pytest.raises(ValidationError):
        recipe_slots("poly-a5", 5, 1)
    with pytest.raises(ValidationError):
        recipe_slots("no-such", 3, 1)


def test_sample_scm_boxes_and_edges():
    scm = sample_scm(3, ell=5, degree=1, family="beta", envs=30)
    adj = true_adjacency(scm)
    expected = np.zeros((5, 5), dtype=bool)
    expected[0, 1] = expected[1, 2] = expected[2, 3] = expected[2, 4] = True
    assert np.array_equal(adj, expected)
    assert np.all((scm.noise_p1 >= 0.1) & (scm.noise_p1 <= 2.0))
    assert np.all((scm.noise_p2 >= 0.1) & (scm.noise_p2 <= 2.0))
    for i in range(1, 5):
        col = scm.coeffs[i][:, np.any(scm.coeffs[i] != 0, axis=0)]
        mags = np.abs(col[col != 0.0])
        assert np.all((mags >= 0.5) & (mags <= 1.0))


def test_sample_scm_deterministic():
    a = sample_scm(42, ell=3, degree=2, family="gamma", graph="poly-a5", envs=6)
    b = sample_scm(42, ell=3, degree=2, family="gamma", graph="poly-a5", envs=6)
    assert np.array_equal(a.noise_p1, b.noise_p1)
    for ta, tb in zip(a.coeffs, b.coeffs):
        assert np.array_equal(ta, tb)


def test_sample_scm_partial_freezes_exactly_requested():
    scm = sample_scm_partial(9, ell=4, degree=1, family="beta",
                             graph="linear-chain", frozen_edges=[(0, 1)],
                             envs=30)
    lam12 = scm.coeffs[1][:, 0]
    assert np.all(lam12 == lam12[0])
    for node in (2, 3):
        col = scm.coeffs[node][:, node - 1]
        assert col.max() - col.min() > 1e-3
    with pytest.raises(ValidationError):
        sample_scm_partial(9, ell=4, degree=1, family="beta",
                           graph="linear-chain", frozen_edges=[(0, 3)])


def test_sample_scm_partial_empty_freeze_matches_plain():
    a = sample_scm(7, ell=3, degree=1, family="gamma", envs=8)
    b = sample_scm_partial(7, ell=3, degree=1, family="gamma",
                           graph="linear-chain", frozen_edges=[], envs=8)
    for ta, tb in zip(a.coeffs, b.coeffs):
        assert np.array_equal(ta, tb)


def test_custom_recipe_slots():
    slots = [(1, (1,)), (2, (1, 1))]
    scm = sample_scm(5, ell=3, degree=2, family="gaussian", graph=slots, envs=7)
    adj = true_adjacency(scm)
    assert adj[0, 1] and adj[0, 2] and adj[1, 2]


# ---------------------------------------------------------------------------
# dataset generation

def _small_dataset(seed=13, ell=3, per_segment=50, envs=8, family="beta",
                   sigma_eps=0.01):
    scm = sample_scm(seed, ell=ell, degree=1, family=family, envs=envs)
    mix = make_mixing(np.random.default_rng(seed + 1), ell=ell, layers=3,
                      sigma_eps=sigma_eps)
    return generate_dataset(scm, mix, per_segment=per_segment, seed=seed + 2)


def test_generate_dataset_shapes_and_labels():
    ds = _small_dataset()
    assert ds.rows == 8 * 50
    assert ds.x.shape == ds.z_true.shape == ds.n_true.shape == (400, 3)
    counts = np.bincount(ds.u, minlength=8)
    assert np.all(counts == 50)


def test_generate_dataset_regeneration_bit_exact():
    ds1 = _small_dataset()
    ds2 = generate_dataset(ds1.scm, ds1.mixing, ds1.per_segment, ds1.seed)
    assert np.array_equal(ds1.x, ds2.x)
    assert np.array_equal(ds1.z_true, ds2.z_true)
    assert np.array_equal(ds1.n_true, ds2.n_true)


def test_generate_dataset_identity_path():
    # zero coefficients, identity mixing, no observation noise: x == n
    scm = sample_scm(1, ell=2, degree=1, family="gaussian",
                     graph=[], envs=5)
    mix = MixingFunction(weights=(np.eye(2),), biases=(np.zeros(2),),
                         slope=0.2, sigma_eps=0.0)
    ds = generate_dataset(scm, mix, per_segment=20, seed=3)
    assert np.array_equal(ds.x, ds.n_true)
    assert np.array_equal(ds.z_true, ds.n_true)


def test_generate_dataset_latents_consistent():
    ds = _small_dataset(sigma_eps=0.0)
    for u in range(ds.scm.envs):
        rows = ds.u == u
        z = structural_forward(ds.scm, ds.n_true[rows], u)
        assert np.array_equal(z, ds.z_true[rows])
        assert np.max(np.abs(mixing_forward(ds.mixing, z) - ds.x[rows])) == 0.0


def test_generate_dataset_moment_check():
    ds = _small_dataset(seed=21, ell=4, per_segment=1000, envs=10,
                        family="gamma")
    cells = 0
    hits = 0
    for u in range(10):
        rows = ds.u == u
        for i in range(4):
            params = ds.scm.noise_params(i, u)
            m = fam.mean(params)
            s = np.sqrt(fam.variance(params))
            cells += 1
            if abs(ds.n_true[rows, i].mean() - m) <= 3 * s / np.sqrt(1000):
                hits += 1
    assert hits >= 0.95 * cells


# ---------------------------------------------------------------------------
# disk round trip

def test_save_load_round_trip(tmp_path):
    ds = _small_dataset()
    out = str(tmp_path / "d")
    save_dataset(ds, out)
    back = load_dataset(out)
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.u, ds.u)
    assert np.array_equal(back.z_true, ds.z_true)
    assert np.array_equal(back.n_true, ds.n_true)
    assert back.seed == ds.seed and back.per_segment == ds.per_segment
    assert np.array_equal(back.scm.noise_p1, ds.scm.noise_p1)
    for a, b in zip(back.scm.coeffs, ds.scm.coeffs):
        assert np.array_equal(a, b)
    # and the loaded generator reproduces the stored arrays exactly
    again = generate_dataset(back.scm, back.mixing, back.per_segment, back.seed)
    assert np.array_equal(again.x, ds.x)


def test_load_reports_truncation(tmp_path):
    ds = _small_dataset()
    out = str(tmp_path / "d")
    save_dataset(ds, out)
    csv_path = os.path.join(out, "data.csv")
    lines = open(csv_path).read().splitlines()
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines[:50]) + "\n")
    with pytest.raises(ValidationError, match="truncated"):
        load_dataset(out)


def test_load_reports_bad_field(tmp_path):
    ds = _small_dataset()
    out = str(tmp_path / "d")
    save_dataset(ds, out)
    csv_path = os.path.join(out, "data.csv")
    lines = open(csv_path).read().splitlines()
    parts = lines[3].split(",")
    parts[2] = "not-a-number"
    lines[3] = ",".join(parts)
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="line 4"):
        load_dataset(out)


def test_load_rejects_schema_mismatch(tmp_path):
    ds = _small_dataset()
    out = str(tmp_path / "d")
    save_dataset(ds, out)
    meta_path = os.path.join(out, "meta.scm-v1")
    meta = json.load(open(meta_path))
    meta["schema"] = "scm-v2"
    json.dump(meta, open(meta_path, "w"))
    with pytest.raises(SchemaVersionError):
        load_dataset(out)


def test_meta_embeds_env_check(tmp_path):
    ds = _small_dataset(ell=2, envs=8)
    out = str(tmp_path / "d")
    save_dataset(ds, out)
    meta = json.load(open(os.path.join(out, "meta.scm-v1")))
    assert meta["env_check"]["passed"] is True

    # too few segments for ell=4: flagged, not raised
    scm = sample_scm(2, ell=4, degree=1, family="beta", envs=3)
    mix = make_mixing(np.random.default_rng(0), ell=4, sigma_eps=0.0)
    ds_bad = generate_dataset(scm, mix, per_segment=5, seed=1)
    out2 = str(tmp_path / "d2")
    save_dataset(ds_bad, out2)
    meta2 = json.load(open(os.path.join(out2, "meta.scm-v1")))
    assert meta2["env_check"]["passed"] is False


def test_dataset_row_validation():
    ds = _small_dataset(ell=2, envs=5)
    with pytest.raises(ValidationError):
        Dataset(x=ds.x, u=ds.u[:-1], z_true=ds.z_true, n_true=ds.n_true,
                scm=ds.scm, mixing=ds.mixing, seed=0, per_segment=5)
