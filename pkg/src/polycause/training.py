"""Training loop, checkpoint files, and evaluation bundles.

One epoch is one Adam step on a batch sampled uniformly over the training
rows (segment labels ride along per row), so `epochs` counts gradient
updates.  Everything that touches randomness goes through a single
generator seeded from the train config, which makes runs bit-reproducible:
same dataset plus same configs gives identical checkpoint bytes.

The held-out split is derived from the dataset seed, not the training
seed, so every mode and every training seed sees the same validation rows
for a given dataset.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .datasets import Dataset
from .errors import ConfigError, NonFiniteError, SchemaVersionError, ValidationError
from .model import (ModeConfig, config_from_dict, elbo, extract_coefficients,
                    init_params, posterior_sample)
from .scm import true_adjacency

_TERMS = ("recon", "kl_z", "kl_lambda", "logprior_lambda", "elbo",
          "objective", "kl_weight")
_VAL_SEED = 10007
_VAL_SAMPLES = 8
_SPLIT_SALT = 9001
_STATUSES = ("ok", "early-stopped", "aborted-nonfinite")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  Defaults are the ones the sweeps use."""

    epochs: int = 3000
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    kl_warmup: int = 300
    eval_every: int = 50
    patience: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "seed", "kl_warmup",
                     "eval_every", "patience"):
            if not isinstance(getattr(self, name), int):
                raise ConfigError(f"{name} must be an integer, "
                                  f"got {getattr(self, name)!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.eps > 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.kl_warmup < 0:
            raise ConfigError(f"kl_warmup must be >= 0, got {self.kl_warmup}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name)
                for f in dataclasses.fields(self)}


def train_config_from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"train config must be a mapping, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
    return TrainConfig(**d)


def validation_split(dataset: Dataset):
    """Fixed 10% held-out rows, stratified by segment.

    The permutation is seeded by the dataset seed alone.  Segments that
    cannot spare a row keep all rows on the training side.
    """
    rng = np.random.default_rng([int(dataset.seed), _SPLIT_SALT])
    train_parts, val_parts = [], []
    for env in range(dataset.scm.envs):
        idx = np.flatnonzero(dataset.u == env)
        k = int(round(0.1 * idx.size))
        k = min(max(k, 1 if idx.size > 1 else 0), idx.size - 1)
        perm = rng.permutation(idx)
        val_parts.append(perm[:k])
        train_parts.append(perm[k:])
    train_idx = np.sort(np.concatenate(train_parts))
    val_idx = np.sort(np.concatenate(val_parts))
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# checkpoint files ("ckpt-v1")

def checkpoint_bytes(params: dict, config: ModeConfig) -> bytes:
    arrays = {}
    for name in sorted(params):
        a = np.asarray(params[name], dtype=np.float64)
        arrays[name] = {
            "shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
        }
    doc = {"schema": "ckpt-v1", "mode_config": config.to_dict(),
           "arrays": arrays}
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("ascii")


def save_checkpoint(params: dict, config: ModeConfig, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, config))


def load_checkpoint(path: str):
    """Read a ckpt-v1 file back as (params, ModeConfig), bit exact."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing checkpoint file {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != "ckpt-v1":
        raise SchemaVersionError(
            f"{path}: unsupported schema {doc.get('schema')!r}")
    for key in ("mode_config", "arrays"):
        if key not in doc:
            raise ValidationError(f"{path}: missing field '{key}'")
    params = {}
    for name, entry in doc["arrays"].items():
        raw = base64.b64decode(entry["data"])
        shape = tuple(int(s) for s in entry["shape"])
        want = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(raw, dtype="<f8")
        if flat.size != want:
            raise ValidationError(
                f"{path}: array '{name}' has {flat.size} values, "
                f"shape {shape} needs {want}")
        params[name] = flat.reshape(shape).astype(np.float64)
    return params, config_from_dict(doc["mode_config"])


# ---------------------------------------------------------------------------
# run records ("run-v1")

@dataclass(frozen=True)
class RunRecord:
    epochs: tuple
    curve: dict
    val_epochs: tuple
    val_elbo: tuple
    status: str
    diagnostic: str
    best_epoch: int
    wall_time_s: float
    checkpoint_path: str
    train_config: TrainConfig
    mode_config: ModeConfig
    versions: dict

    def __post_init__(self):
        if self.status not in _STATUSES:
            raise ValidationError(f"unknown run status {self.status!r}")
        ep = self.epochs
        if any(ep[i] >= ep[i + 1] for i in range(len(ep) - 1)):
            raise ValidationError("epoch indices must be strictly increasing")
        for name, vals in self.curve.items():
            if len(vals) != len(ep):
                raise ValidationError(
                    f"curve '{name}' has {len(vals)} values for {len(ep)} epochs")
            if not np.all(np.isfinite(vals)):
                raise ValidationError(f"curve '{name}' holds non-finite values")
        if len(self.val_epochs) != len(self.val_elbo):
            raise ValidationError("validation epochs and values disagree")
        if not np.all(np.isfinite(self.val_elbo)):
            raise ValidationError("validation curve holds non-finite values")

    def to_dict(self) -> dict:
        return {
            "schema": "run-v1",
            "status": self.status,
            "diagnostic": self.diagnostic,
            "epochs": list(self.epochs),
            "curve": {k: list(v) for k, v in self.curve.items()},
            "val_epochs": list(self.val_epochs),
            "val_elbo": list(self.val_elbo),
            "best_epoch": self.best_epoch,
            "wall_time_s": self.wall_time_s,
            "checkpoint_path": self.checkpoint_path,
            "train_config": self.train_config.to_dict(),
            "mode_config": self.mode_config.to_dict(),
            "versions": dict(self.versions),
        }


def save_run(record: RunRecord, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(record.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_run(path: str) -> RunRecord:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing run record {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema") != "run-v1":
        raise SchemaVersionError(
            f"{path}: unsupported schema {doc.get('schema')!r}")
    return RunRecord(
        epochs=tuple(doc["epochs"]),
        curve={k: tuple(v) for k, v in doc["curve"].items()},
        val_epochs=tuple(doc["val_epochs"]),
        val_elbo=tuple(doc["val_elbo"]),
        status=doc["status"],
        diagnostic=doc["diagnostic"],
        best_epoch=doc["best_epoch"],
        wall_time_s=doc["wall_time_s"],
        checkpoint_path=doc["checkpoint_path"],
        train_config=train_config_from_dict(doc["train_config"]),
        mode_config=config_from_dict(doc["mode_config"]),
        versions=doc["versions"],
    )


def _versions() -> dict:
    from . import __version__

    return {"package": __version__, "numpy": np.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# the loop

def _kl_weight(epoch: int, warmup: int) -> float:
    if warmup <= 0:
        return 1.0
    return min(1.0, epoch / warmup)


def _snapshot(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def _held_out_elbo(x, u, params, config: ModeConfig, n_total: int) -> float:
    """Multi-sample bound on fixed rows with a fixed generator.

    The same seed every call makes values comparable across epochs and
    across modes; the training stream is never touched.
    """
    rng = np.random.default_rng(_VAL_SEED)
    vals = []
    for _ in range(_VAL_SAMPLES):
        _, terms = elbo((x, u), params, config, rng, kl_weight=1.0,
                        n_total=n_total)
        vals.append(terms["elbo"])
    return float(np.mean(vals))


def train(dataset: Dataset, mode_config: ModeConfig, train_config: TrainConfig,
          checkpoint_dir: str = None, on_eval=None):
    """Fit the model; returns (params, RunRecord).

    Deterministic given (dataset, configs).  A non-finite loss aborts the
    loop: the parameters from before the failing step come back with
    status "aborted-nonfinite" and the breakdown in the diagnostic.
    ``on_eval(epoch, params_copy, val_elbo)`` fires at every evaluation
    point for callers that want mid-run checkpoints.
    """
    if not isinstance(mode_config, ModeConfig):
        raise ConfigError("mode_config must be a ModeConfig")
    if not isinstance(train_config, TrainConfig):
        raise ConfigError("train_config must be a TrainConfig")
    if mode_config.degree < dataset.scm.degree:
        raise ConfigError(
            f"mode degree {mode_config.degree} cannot express generator "
            f"degree {dataset.scm.degree}")

    t0 = time.perf_counter()
    train_idx, val_idx = validation_split(dataset)
    n_total = int(train_idx.size)
    rng = np.random.default_rng(train_config.seed)
    params = init_params(dataset.scm.ell, dataset.scm.envs, mode_config, rng)
    state = ad.adam_init(params)

    epoch_ids = []
    curve = {k: [] for k in _TERMS}
    val_epochs, val_curve = [], []
    best_val, best_epoch, best_params = -np.inf, 0, None
    bad_evals = 0
    status, diagnostic = "ok", ""

    for epoch in range(1, train_config.epochs + 1):
        before = _snapshot(params)
        weight = _kl_weight(epoch, train_config.kl_warmup)
        rows = train_idx[rng.integers(0, n_total, size=train_config.batch_size)]
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        try:
            obj, terms = elbo((dataset.x[rows], dataset.u[rows]), leaves,
                              mode_config, rng, kl_weight=weight,
                              n_total=n_total)
            gmap = tape.backward(ad.neg(obj))
            grads = {k: gmap[t] for k, t in leaves.items()}
            ad.adam_step(params, grads, state, lr=train_config.lr,
                         beta1=train_config.beta1, beta2=train_config.beta2,
                         eps=train_config.eps)
        except NonFiniteError as exc:
            status = "aborted-nonfinite"
            diagnostic = f"epoch {epoch}: {exc}"
            params = before
            break
        epoch_ids.append(epoch)
        for k in _TERMS:
            curve[k].append(float(terms[k]))

        at_eval = (epoch % train_config.eval_every == 0
                   or epoch == train_config.epochs)
        if at_eval and val_idx.size:
            try:
                val = _held_out_elbo(dataset.x[val_idx], dataset.u[val_idx],
                                     params, mode_config, n_total)
            except NonFiniteError as exc:
                status = "aborted-nonfinite"
                diagnostic = f"epoch {epoch} validation: {exc}"
                break
            val_epochs.append(epoch)
            val_curve.append(val)
            if on_eval is not None:
                on_eval(epoch, _snapshot(params), val)
            if val > best_val + 1e-9:
                best_val, best_epoch = val, epoch
                best_params = _snapshot(params)
                bad_evals = 0
            else:
                bad_evals += 1
                if train_config.patience and bad_evals >= train_config.patience:
                    status = "early-stopped"
                    break

    if status == "early-stopped" and best_params is not None:
        params = best_params

    ckpt_path = ""
    record_kwargs = dict(
        epochs=tuple(epoch_ids),
        curve={k: tuple(v) for k, v in curve.items()},
        val_epochs=tuple(val_epochs),
        val_elbo=tuple(val_curve),
        status=status,
        diagnostic=diagnostic,
        best_epoch=best_epoch,
        checkpoint_path=ckpt_path,
        train_config=train_config,
        mode_config=mode_config,
        versions=_versions(),
    )
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        ckpt_path = os.path.join(checkpoint_dir, "model.ckpt-v1")
        save_checkpoint(params, mode_config, ckpt_path)
        record_kwargs["checkpoint_path"] = ckpt_path
    record = RunRecord(wall_time_s=time.perf_counter() - t0, **record_kwargs)
    if checkpoint_dir is not None:
        save_run(record, os.path.join(checkpoint_dir, "run.run-v1"))
    return params, record


def loss_sanity_fraction(record: RunRecord, window: int = 50) -> float:
    """Fraction of adjacent window means of the training bound that do not
    decrease.  Disjoint windows; needs at least two of them."""
    vals = np.asarray(record.curve["elbo"], dtype=np.float64)
    blocks = vals.size // window
    if blocks < 2:
        raise ValidationError(
            f"need at least {2 * window} epochs for window {window}")
    means = vals[:blocks * window].reshape(blocks, window).mean(axis=1)
    return float(np.mean(np.diff(means) >= -1e-9))


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    mpc: mt.MpcReport
    shd: mt.ShdReport
    adjacency: tuple
    val_elbo: float
    tau: float

    def to_dict(self) -> dict:
        return {"mpc": self.mpc.to_dict(), "shd": self.shd.to_dict(),
                "adjacency": [list(map(int, row)) for row in self.adjacency],
                "val_elbo": self.val_elbo, "tau": self.tau}


def _align(a_hat: np.ndarray, pairing) -> np.ndarray:
    """Reindex a learned adjacency so row/column i is the learned node
    matched to true node i."""
    idx = np.asarray(pairing, dtype=np.intp)
    return a_hat[np.ix_(idx, idx)]


def evaluate(params: dict, config: ModeConfig, dataset: Dataset,
             tau: float = 0.1) -> EvalReport:
    """Metrics bundle for trained parameters on a dataset.

    Latents are posterior means over all rows; the learned graph is read
    from the coefficient tables, aligned to the true node order through
    the MPC pairing, and scored against the generator's adjacency.  The
    held-out bound uses the same fixed 10% split as training.
    """
    z, _ = posterior_sample(dataset.x, dataset.u, params, config,
                            mean_only=True)
    mpc_report = mt.mpc(dataset.z_true, z.data)
    tables = extract_coefficients(params, config)
    a_hat = mt.extract_adjacency(tables, config.degree, tau)
    aligned = _align(a_hat, mpc_report.pairing)
    shd_report = mt.shd(true_adjacency(dataset.scm), aligned, tau=tau)
    train_idx, val_idx = validation_split(dataset)
    val = (_held_out_elbo(dataset.x[val_idx], dataset.u[val_idx], params,
                          config, int(train_idx.size))
           if val_idx.size else float("nan"))
    return EvalReport(mpc=mpc_report, shd=shd_report,
                      adjacency=tuple(map(tuple, aligned.astype(int))),
                      val_elbo=val, tau=tau)


def evaluate_oracle(dataset: Dataset, tau: float = 0.1) -> EvalReport:
    """The bundle a perfect model would get: true latents, true graph."""
    mpc_report = mt.mpc(dataset.z_true, dataset.z_true)
    truth = true_adjacency(dataset.scm)
    shd_report = mt.shd(truth, truth, tau=tau)
    return EvalReport(mpc=mpc_report, shd=shd_report,
                      adjacency=tuple(map(tuple, truth.astype(int))),
                      val_elbo=float("nan"), tau=tau)
