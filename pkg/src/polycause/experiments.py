"""Experiment grid: named recipes, sweep execution, and report files.

A sweep cell is one (ell, seed, method) triple under a tagged recipe.  Cell
datasets, initializations, and batches are all derived from the cell seed,
so any cell can be rerun alone and byte-matches its sweep row.  Runtimes
live in a side file because every other report artifact is contracted to
be reproducible bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import generate_dataset, recipe_slots, sample_scm_partial
from .errors import ConfigError, SchemaVersionError, ValidationError
from .families import FAMILIES
from .metrics import pearson
from .mixing import make_mixing, mixing_forward
from .model import ModeConfig, config_from_dict
from .monomials import prefix_index
from .scm import construct_counterexample, structural_forward
from .training import TrainConfig, evaluate, train, train_config_from_dict

# tag -> (graph recipe, noise family, polynomial degree)
TAGS = {
    "linear-beta": ("linear-chain", "beta", 1),
    "linear-gamma": ("linear-chain", "gamma", 1),
    "poly-gaussian": ("poly-a5", "gaussian", 2),
    "linear-gaussian": ("linear-chain", "gaussian", 1),
    "partial-change": ("linear-chain", "beta", 1),
    "counterexample": ("linear-chain", "gaussian", 1),
    "inverse-family-stress": ("linear-chain", "inverse_gaussian", 1),
}

METHODS = ("proposed", "baseline")
_SIGMA_EPS = 0.01
_MIX_LAYERS = 3


@dataclass(frozen=True)
class ExperimentConfig:
    tag: str
    ells: tuple = (2, 3)
    seeds: tuple = (1, 2, 3, 4, 5)
    envs: int = 30
    per_segment: int = 1000
    frozen_edges: tuple = ()
    methods: tuple = METHODS
    tau: float = 0.1
    family: str = ""
    mode_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigError(f"tag: unknown experiment {self.tag!r}, "
                              f"expected one of {sorted(TAGS)}")
        ells = tuple(int(e) for e in self.ells)
        if not ells or any(e < 1 for e in ells):
            raise ConfigError(f"ells: need positive node counts, got {self.ells}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("seeds: need at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"seeds: must be distinct, got {self.seeds}")
        if self.envs < 1:
            raise ConfigError(f"envs: must be >= 1, got {self.envs}")
        if self.per_segment < 1:
            raise ConfigError(f"per_segment: must be >= 1, got {self.per_segment}")
        edges = tuple((int(p), int(c)) for p, c in self.frozen_edges)
        for p, c in edges:
            if not 0 <= p < c:
                raise ConfigError(
                    f"frozen_edges: edge ({p}, {c}) is not causally ordered")
        if self.tag in ("partial-change", "counterexample") and not edges:
            raise ConfigError(f"frozen_edges: tag {self.tag!r} freezes "
                              "at least one edge")
        methods = tuple(self.methods)
        bad = set(methods) - set(METHODS)
        if bad or not methods:
            raise ConfigError(f"methods: expected a subset of {METHODS}, "
                              f"got {self.methods}")
        if not 0.0 < self.tau:
            raise ConfigError(f"tau: must be positive, got {self.tau}")
        if self.family and self.family not in FAMILIES:
            raise ConfigError(f"family: unknown family {self.family!r}")
        if not isinstance(self.mode_overrides, dict):
            raise ConfigError("mode_overrides: must be a mapping")
        if not isinstance(self.train, TrainConfig):
            raise ConfigError("train: must be a TrainConfig")
        object.__setattr__(self, "ells", ells)
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "frozen_edges", edges)
        object.__setattr__(self, "methods", methods)

    @property
    def data_family(self) -> str:
        return self.family or TAGS[self.tag][1]

    @property
    def graph(self) -> str:
        return TAGS[self.tag][0]

    @property
    def degree(self) -> int:
        return TAGS[self.tag][2]

    def to_dict(self) -> dict:
        return {
            "schema": "experiment-v1",
            "tag": self.tag,
            "ells": list(self.ells),
            "seeds": list(self.seeds),
            "envs": self.envs,
            "per_segment": self.per_segment,
            "frozen_edges": [list(e) for e in self.frozen_edges],
            "methods": list(self.methods),
            "tau": self.tau,
            "family": self.family,
            "mode_overrides": dict(self.mode_overrides),
            "train": self.train.to_dict(),
        }


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"experiment config must be a mapping, "
                          f"got {type(doc).__name__}")
    doc = dict(doc)
    schema = doc.pop("schema", "experiment-v1")
    if schema != "experiment-v1":
        raise SchemaVersionError(f"schema: unsupported {schema!r}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
    if "train" in doc:
        try:
            doc["train"] = train_config_from_dict(doc["train"])
        except ConfigError as exc:
            raise ConfigError(f"train.{exc}") from None
    if "frozen_edges" in doc:
        doc["frozen_edges"] = tuple(tuple(e) for e in doc["frozen_edges"])
    for key in ("ells", "seeds", "methods"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return ExperimentConfig(**doc)


def load_experiment(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"missing experiment config {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return experiment_from_dict(doc)


# ---------------------------------------------------------------------------
# cells

def _cell_seed(config: ExperimentConfig, ell: int, seed: int, stream: int) -> int:
    tag_index = sorted(TAGS).index(config.tag)
    ss = np.random.SeedSequence([tag_index, ell, seed, stream])
    return int(ss.generate_state(1)[0])


def cell_dataset(config: ExperimentConfig, ell: int, seed: int):
    """The dataset for one cell, reproducible from (tag, ell, seed)."""
    scm = sample_scm_partial(
        np.random.default_rng(_cell_seed(config, ell, seed, 0)),
        ell, config.degree, config.data_family, config.graph,
        frozen_edges=config.frozen_edges, envs=config.envs)
    mix = make_mixing(np.random.default_rng(_cell_seed(config, ell, seed, 1)),
                      ell, layers=_MIX_LAYERS, sigma_eps=_SIGMA_EPS)
    return generate_dataset(scm, mix, config.per_segment,
                            seed=_cell_seed(config, ell, seed, 2))


def mode_for(config: ExperimentConfig, method: str) -> ModeConfig:
    """proposed: family-matched mode plus any overrides; baseline: stock
    independent-prior model at the same degree."""
    if method == "baseline":
        return config_from_dict({"baseline": True, "degree": config.degree})
    base = {"degree": config.degree}
    if config.data_family == "gaussian":
        base["mode"] = "gaussian-analytic"
    else:
        base["mode"] = "non-gaussian"
        base["family"] = config.data_family
    base.update(config.mode_overrides)
    return config_from_dict(base)


def run_cell(config: ExperimentConfig, ell: int, seed: int, method: str):
    """Train and score one cell; returns (row dict, runtime seconds)."""
    t0 = time.perf_counter()
    dataset = cell_dataset(config, ell, seed)
    mode = mode_for(config, method)
    tc = dataclasses.replace(config.train, seed=seed)
    params, record = train(dataset, mode, tc)
    report = evaluate(params, mode, dataset, tau=config.tau)
    row = {
        "tag": config.tag,
        "ell": ell,
        "seed": seed,
        "method": method,
        "mpc": report.mpc.mean,
        "per_node": [float(v) for v in report.mpc.per_node],
        "shd": report.shd.shd,
        "val_elbo": report.val_elbo,
        "status": record.status,
        "env_ok": bool(dataset.scm.envs >= 2 * ell + 1),
    }
    return row, time.perf_counter() - t0


def _pool_cell(args):
    config_doc, ell, seed, method = args
    config = experiment_from_dict(config_doc)
    try:
        row, elapsed = run_cell(config, ell, seed, method)
        return (ell, seed, method, row, elapsed, "")
    except Exception as exc:  # cell isolation: the sweep must go on
        return (ell, seed, method, None, 0.0, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class SweepReport:
    config: ExperimentConfig
    rows: tuple
    aggregates: dict
    failures: tuple
    runtimes: dict

    def to_dict(self) -> dict:
        return {
            "schema": "sweep-v1",
            "config": self.config.to_dict(),
            "rows": [dict(r) for r in self.rows],
            "aggregates": {k: dict(v) for k, v in self.aggregates.items()},
            "failures": [dict(f) for f in self.failures],
        }


def recompute_aggregates(rows) -> dict:
    """Per (ell, method) medians and IQRs, straight from the rows."""
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["ell"], row["method"]), []).append(row)
    out = {}
    for (ell, method), grp in sorted(groups.items()):
        mpcs = np.array([r["mpc"] for r in grp])
        shds = np.array([r["shd"] for r in grp])
        q1, q3 = np.percentile(mpcs, [25.0, 75.0])
        nodes = np.array([r["per_node"] for r in grp])
        out[f"l{ell}-{method}"] = {
            "runs": len(grp),
            "median_mpc": float(np.median(mpcs)),
            "iqr_mpc": float(q3 - q1),
            "median_shd": float(np.median(shds)),
            "median_per_node": [float(v) for v in np.median(nodes, axis=0)],
            "env_ok": all(r["env_ok"] for r in grp),
        }
    return out


def run_sweep(config: ExperimentConfig, workers: int = 1,
              progress=None) -> SweepReport:
    """The full (ell, seed, method) grid; failed cells are recorded and
    skipped, never fatal."""
    cells = [(ell, seed, method) for ell in config.ells
             for seed in config.seeds for method in config.methods]
    results = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        doc = config.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for got in pool.map(_pool_cell,
                                [(doc, e, s, m) for e, s, m in cells]):
                results[got[:3]] = got[3:]
                if progress is not None:
                    progress(*got[:3])
    else:
        for ell, seed, method in cells:
            results[(ell, seed, method)] = _pool_cell(
                (config.to_dict(), ell, seed, method))[3:]
            if progress is not None:
                progress(ell, seed, method)

    rows, failures, runtimes = [], [], {}
    for key in sorted(results):
        row, elapsed, err = results[key]
        ell, seed, method = key
        name = f"{config.tag}-l{ell}-s{seed}-{method}"
        if err:
            failures.append({"ell": ell, "seed": seed, "method": method,
                             "error": err})
            continue
        rows.append(row)
        runtimes[name] = elapsed
    return SweepReport(config=config, rows=tuple(rows),
                       aggregates=recompute_aggregates(rows),
                       failures=tuple(failures), runtimes=runtimes)


def save_sweep(report: SweepReport, out_dir: str) -> None:
    """sweep.json and the CSVs are contracted deterministic; runtimes are
    measurements and go in their own file."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "runtimes.json"), "w") as fh:
        json.dump({"schema": "runtimes-v1",
                   "seconds": report.runtimes}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_sweep_csv(report, os.path.join(out_dir, "sweep.csv"))
    write_node_csv(report, os.path.join(out_dir, "nodes.csv"))


def load_sweep(path: str) -> SweepReport:
    """Read sweep.json back, re-deriving and checking the aggregates."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing sweep report {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != "sweep-v1":
        raise SchemaVersionError(
            f"{path}: unsupported schema {doc.get('schema')!r}")
    rows = tuple(doc["rows"])
    fresh = recompute_aggregates(rows)
    if fresh != doc["aggregates"]:
        raise ValidationError(
            f"{path}: stored aggregates do not match the row data")
    side = os.path.join(os.path.dirname(path), "runtimes.json")
    runtimes = {}
    if os.path.exists(side):
        with open(side) as fh:
            runtimes = json.load(fh).get("seconds", {})
    return SweepReport(config=experiment_from_dict(doc["config"]),
                       rows=rows, aggregates=fresh,
                       failures=tuple(doc["failures"]), runtimes=runtimes)


def write_sweep_csv(report: SweepReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "ell", "seed", "method", "mpc", "shd",
                         "val_elbo", "status", "env_ok", "per_node"])
        for r in report.rows:
            writer.writerow([r["tag"], r["ell"], r["seed"], r["method"],
                             repr(float(r["mpc"])), r["shd"],
                             repr(float(r["val_elbo"])), r["status"],
                             int(r["env_ok"]),
                             ";".join(repr(float(v)) for v in r["per_node"])])


def write_node_csv(report: SweepReport, path: str) -> None:
    """Long format, one row per node, for per-node plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "ell", "seed", "method", "node", "mpc_node"])
        for r in report.rows:
            for i, v in enumerate(r["per_node"]):
                writer.writerow([r["tag"], r["ell"], r["seed"], r["method"],
                                 i + 1, repr(float(v))])


# ---------------------------------------------------------------------------
# counterexample demonstration

def counterexample_report(config: ExperimentConfig, rows: int = 2000) -> dict:
    """Build a frozen-edge system, remove the frozen term into a witness
    map, and measure what a perfect fit could not distinguish."""
    ell = config.ells[0]
    seed = config.seeds[0]
    parent, child = config.frozen_edges[0]
    if child >= ell:
        raise ConfigError(f"frozen_edges: child {child} needs ell > {child}")
    scm = sample_scm_partial(
        np.random.default_rng(_cell_seed(config, ell, seed, 0)),
        ell, config.degree, config.data_family, config.graph,
        frozen_edges=config.frozen_edges, envs=config.envs)
    mix = make_mixing(np.random.default_rng(_cell_seed(config, ell, seed, 1)),
                      ell, layers=_MIX_LAYERS, sigma_eps=0.0)
    slots = recipe_slots(config.graph, ell, config.degree)
    expt = next(e for node, e in slots if node == child and e[parent] > 0)
    alt, witness = construct_counterexample(
        scm, child, prefix_index(expt, child, config.degree))

    rng = np.random.default_rng(_cell_seed(config, ell, seed, 3))
    per_env = max(1, rows // scm.envs)
    zs, zps = [], []
    worst = 0.0
    from . import families as fam

    for u in range(scm.envs):
        n = np.empty((per_env, ell))
        for i in range(ell):
            n[:, i] = fam.sample_arr(scm.family, scm.noise_p1[i, u],
                                     scm.noise_p2[i, u], rng, size=per_env)
        z = structural_forward(scm, n, u)
        zp = structural_forward(alt, n, u)
        x = mixing_forward(mix, z)
        xp = mixing_forward(mix, witness.apply(zp))
        worst = max(worst, float(np.max(np.abs(x - xp))))
        zs.append(z)
        zps.append(zp)
    z = np.concatenate(zs)
    zp = np.concatenate(zps)
    corr = [pearson(z[:, i], zp[:, i]) for i in range(ell)]
    return {
        "schema": "counterexample-v1",
        "tag": config.tag,
        "ell": ell,
        "seed": seed,
        "family": config.data_family,
        "frozen_edge": [parent, child],
        "witness": witness.to_dict(),
        "max_observation_discrepancy": worst,
        "per_node_corr": [float(c) for c in corr],
        "affected_node_corr": float(corr[child]),
        "rows": int(z.shape[0]),
    }
