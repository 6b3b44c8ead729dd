"""Synthetic multi-environment datasets: SCM recipes, sampling, and disk IO.

A dataset directory holds two files:

  data.csv      header seg,x1..,z1..,n1..  one row per sample
  meta.scm-v1   JSON sidecar: seed, counts, the scm-v1 model document,
                the mixing function, and the environment sufficiency report

Floats are written with repr, so save/load and regeneration from
(scm, mixing, seed) are bit-exact.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import families as fam
from .errors import (InsufficientEnvironmentsError, SchemaVersionError,
                     ValidationError)
from .mixing import MixingFunction, mixing_forward, mixing_from_dict, mixing_to_dict
from .monomials import basis_size, prefix_index
from .scm import (Scm, env_sufficiency_check, scm_from_dict, structural_forward)

RECIPES = ("linear-chain", "poly-a5", "custom")

# Noise parameter boxes used by the recipes, one (low, high) pair per source
# parameter. Gaussian means may be negative; everything else is positive.
PARAM_BOXES = {
    "gaussian": ((-2.0, 2.0), (0.1, 2.0)),
    "gamma": ((0.1, 2.0), (0.1, 2.0)),
    "beta": ((0.1, 2.0), (0.1, 2.0)),
    "inverse_gaussian": ((0.1, 2.0), (0.1, 2.0)),
    "inverse_gamma": ((2.1, 4.0), (0.1, 2.0)),
}


def recipe_slots(recipe, ell: int, degree: int):
    """The (node, exponent tuple) slots a recipe assigns coefficients to.

    linear-chain: a path z_1 -> ... -> z_ell, except that at ell = 5 the
    last edge is replaced by z_3 -> z_5 alongside z_3 -> z_4. poly-a5 is
    the five-node polynomial system (z_1^2, z_2, z_2 z_3, z_3^2), truncated
    to the first ell nodes; nodes past the fifth continue linearly. An
    explicit list of (node, exponent tuple) pairs passes through unchanged.
    """
    if isinstance(recipe, (list, tuple)):
        out = []
        for node, expt in recipe:
            node = int(node)
            expt = tuple(int(p) for p in expt)
            if len(expt) != node:
                raise ValidationError(
                    f"slot for node {node + 1} needs a length-{node} exponent "
                    f"tuple, got {expt}")
            if not 1 <= sum(expt) <= degree:
                raise ValidationError(f"slot {expt} has degree outside 1..{degree}")
            out.append((node, expt))
        return out
    if recipe == "linear-chain":
        out = []
        for i in range(1, ell):
            parent = 2 if (ell == 5 and i == 4) else i - 1
            e = [0] * i
            e[parent] = 1
            out.append((i, tuple(e)))
        return out
    if recipe == "poly-a5":
        if degree < 2:
            raise ValidationError("poly-a5 needs degree >= 2")
        patterns = {1: (2,), 2: (0, 1), 3: (0, 1, 1), 4: (0, 0, 2, 0)}
        out = []
        for i in range(1, ell):
            if i in patterns:
                out.append((i, patterns[i]))
            else:
                e = [0] * i
                e[i - 1] = 1
                out.append((i, tuple(e)))
        return out
    raise ValidationError(f"unknown recipe {recipe!r}, expected one of {RECIPES}")


def sample_scm(rng, ell: int, degree: int, family: str, graph="linear-chain",
               envs: int = 30) -> Scm:
    """Draw a recipe SCM: coefficients from U[-1,-0.5] u [0.5,1] on recipe
    slots per environment, noise parameters from the family's box."""
    return sample_scm_partial(rng, ell, degree, family, graph,
                              frozen_edges=(), envs=envs)


def sample_scm_partial(rng, ell: int, degree: int, family: str,
                       graph="linear-chain", frozen_edges=(),
                       envs: int = 30) -> Scm:
    """Like sample_scm, but slots touched by a frozen edge (parent, child)
    get one coefficient shared across every environment."""
    rng = _as_rng(rng)
    if family not in PARAM_BOXES:
        raise ValidationError(f"unknown family '{family}'")
    slots = recipe_slots(graph, ell, degree)
    frozen_slots = _resolve_frozen(slots, frozen_edges)

    box1, box2 = PARAM_BOXES[family]
    p1 = rng.uniform(box1[0], box1[1], size=(ell, envs))
    p2 = rng.uniform(box2[0], box2[1], size=(ell, envs))

    coeffs = [np.zeros((envs, basis_size(i, degree))) for i in range(ell)]
    for idx, (node, expt) in enumerate(slots):
        count = 1 if idx in frozen_slots else envs
        vals = rng.uniform(0.5, 1.0, size=count) * (2 * rng.integers(0, 2, size=count) - 1)
        coeffs[node][:, prefix_index(expt, node, degree)] = vals
    return Scm(ell=ell, degree=degree, envs=envs, family=family,
               noise_p1=p1, noise_p2=p2, coeffs=tuple(coeffs))


def _resolve_frozen(slots, frozen_edges):
    chosen = set()
    for parent, child in frozen_edges:
        hits = [idx for idx, (node, expt) in enumerate(slots)
                if node == child and expt[parent] > 0]
        if not hits:
            raise ValidationError(
                f"no recipe slot realizes the edge z{parent + 1} -> z{child + 1}")
        chosen.update(hits)
    return chosen


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    u: np.ndarray
    z_true: np.ndarray
    n_true: np.ndarray
    scm: Scm
    mixing: MixingFunction
    seed: int
    per_segment: int

    def __post_init__(self):
        rows = self.x.shape[0]
        if not (self.u.shape == (rows,) and self.z_true.shape == self.x.shape
                and self.n_true.shape == self.x.shape):
            raise ValidationError("dataset arrays disagree on row count or width")
        if rows and (self.u.min() < 0 or self.u.max() >= self.scm.envs):
            raise ValidationError("segment labels must lie in [0, envs)")

    @property
    def rows(self) -> int:
        return self.x.shape[0]


def generate_dataset(scm: Scm, mixing: MixingFunction, per_segment: int,
                     seed: int) -> Dataset:
    """Draw per_segment samples from every environment.

    RNG consumption order is part of the regeneration contract: for each
    environment, first the noise columns in node order, then the
    observation noise block.
    """
    if per_segment < 1:
        raise ValidationError(f"per_segment must be >= 1, got {per_segment}")
    if mixing.ell != scm.ell:
        raise ValidationError(
            f"mixing width {mixing.ell} does not match scm ell {scm.ell}")
    rng = np.random.default_rng(seed)
    xs, us, zs, ns = [], [], [], []
    for u in range(scm.envs):
        n = np.empty((per_segment, scm.ell))
        for i in range(scm.ell):
            n[:, i] = fam.sample_arr(scm.family, scm.noise_p1[i, u],
                                     scm.noise_p2[i, u], rng, size=per_segment)
        z = structural_forward(scm, n, u)
        x = mixing_forward(mixing, z)
        if mixing.sigma_eps > 0.0:
            x = x + rng.normal(0.0, mixing.sigma_eps, size=x.shape)
        xs.append(x)
        us.append(np.full(per_segment, u, dtype=np.int64))
        zs.append(z)
        ns.append(n)
    return Dataset(x=np.concatenate(xs), u=np.concatenate(us),
                   z_true=np.concatenate(zs), n_true=np.concatenate(ns),
                   scm=scm, mixing=mixing, seed=seed, per_segment=per_segment)


def _env_check_dict(scm: Scm) -> dict:
    try:
        return env_sufficiency_check(scm).to_dict()
    except InsufficientEnvironmentsError as exc:
        return {"passed": False, "reason": str(exc)}


def save_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    ell = ds.scm.ell
    header = (["seg"] + [f"x{i + 1}" for i in range(ell)]
              + [f"z{i + 1}" for i in range(ell)]
              + [f"n{i + 1}" for i in range(ell)])
    with open(os.path.join(out_dir, "data.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in range(ds.rows):
            row = [str(int(ds.u[r]))]
            row += [repr(float(v)) for v in ds.x[r]]
            row += [repr(float(v)) for v in ds.z_true[r]]
            row += [repr(float(v)) for v in ds.n_true[r]]
            writer.writerow(row)
    meta = {
        "schema": "scm-v1",
        "kind": "dataset-meta",
        "seed": ds.seed,
        "per_segment": ds.per_segment,
        "rows": ds.rows,
        "scm": json.loads(_scm_json(ds.scm)),
        "mixing": mixing_to_dict(ds.mixing),
        "env_check": _env_check_dict(ds.scm),
    }
    with open(os.path.join(out_dir, "meta.scm-v1"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _scm_json(scm: Scm) -> str:
    from .scm import scm_to_text

    return scm_to_text(scm)


def load_dataset(path: str) -> Dataset:
    """Read a dataset directory back; errors carry file and line context."""
    meta_path = os.path.join(path, "meta.scm-v1")
    csv_path = os.path.join(path, "data.csv")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing metadata file {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{meta_path}: not valid JSON ({exc})") from None
    if meta.get("schema") != "scm-v1":
        raise SchemaVersionError(
            f"{meta_path}: unsupported schema {meta.get('schema')!r}")
    for key in ("seed", "per_segment", "rows", "scm", "mixing"):
        if key not in meta:
            raise ValidationError(f"{meta_path}: missing field '{key}'")
    scm = scm_from_dict(meta["scm"])
    mixing = mixing_from_dict(meta["mixing"])
    ell = scm.ell

    want = 1 + 3 * ell
    x = np.empty((meta["rows"], ell))
    z = np.empty((meta["rows"], ell))
    n = np.empty((meta["rows"], ell))
    u = np.empty(meta["rows"], dtype=np.int64)
    try:
        with open(csv_path) as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValidationError(f"{csv_path}: empty file")
            expected = (["seg"] + [f"x{i + 1}" for i in range(ell)]
                        + [f"z{i + 1}" for i in range(ell)]
                        + [f"n{i + 1}" for i in range(ell)])
            if header != expected:
                raise ValidationError(
                    f"{csv_path}: header {header!r} does not match the "
                    f"metadata (expected {expected!r})")
            r = -1
            for r, row in enumerate(reader):
                if r >= meta["rows"]:
                    raise ValidationError(
                        f"{csv_path}: more rows than the declared {meta['rows']}")
                if len(row) != want:
                    raise ValidationError(
                        f"{csv_path} line {r + 2}: expected {want} fields, "
                        f"got {len(row)}")
                try:
                    u[r] = int(row[0])
                    vals = [float(v) for v in row[1:]]
                except ValueError as exc:
                    raise ValidationError(
                        f"{csv_path} line {r + 2}: {exc}") from None
                x[r] = vals[:ell]
                z[r] = vals[ell:2 * ell]
                n[r] = vals[2 * ell:]
            if r + 1 != meta["rows"]:
                raise ValidationError(
                    f"{csv_path}: truncated, {r + 1} data rows but metadata "
                    f"declares {meta['rows']}")
    except FileNotFoundError:
        raise ValidationError(f"missing data file {csv_path}") from None
    return Dataset(x=x, u=u, z_true=z, n_true=n, scm=scm, mixing=mixing,
                   seed=int(meta["seed"]), per_segment=int(meta["per_segment"]))
