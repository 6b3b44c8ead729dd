"""Variational estimator for multi-environment polynomial latent models.

The generative picture matches the synthetic data: latent variables follow
polynomial structural equations whose coefficients depend on the segment
label, structural noise comes from a two-parameter exponential family, and
the observation is a smooth mixing of the latents plus a little Gaussian
noise.  Inference is amortized with small fully connected networks (three
hidden layers of width 30, leaky activations) built on the tape in
``autodiff``.

Two modes:

* ``gaussian-analytic``: each conditional prior p(z_i | z_<i, u) is Gaussian
  with the polynomial as its mean, so the per-node KL against a chained
  Gaussian posterior is closed form.  The coefficient tables are a
  deterministic network output pushed toward zero by a Laplace log-prior.
* ``non-gaussian``: the noise keeps its family.  The posterior factorizes
  over the coefficient tables (Laplace, one draw per segment) and the noise
  variables (same family as the prior, pathwise sampled), and the latents
  are recomposed through the structural equations.  Both KL blocks stay
  analytic.

A coefficient slot is valid for node i only when its monomial involves
strictly earlier nodes.  The 0/1 mask enforcing this multiplies every
network output that could reach an invalid slot, so gradients at masked
positions are exactly zero, not merely small.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import families as ef
from .errors import ConfigError, NonFiniteError, ShapeError, ValidationError
from .monomials import basis_size, exponent_tuples

MODES = ("gaussian-analytic", "non-gaussian")

_WIDTH = 30
_SLOPE = 0.2
_FLOOR = 1e-4
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModeConfig:
    """What the estimator assumes about the data and how it is regularized.

    ``baseline`` drops the coefficient network entirely: the prior becomes a
    product of independent per-node Gaussians that still depend on the
    segment label.  That is the reference method the estimator is compared
    against.
    """

    mode: str = "gaussian-analytic"
    family: str | None = None
    degree: int = 1
    laplace_b: float = 0.1
    kl_z_weight: float = 1.0
    kl_lambda_weight: float = 1.0
    baseline: bool = False
    obs_var: float = 1e-4
    learn_obs_var: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.mode == "non-gaussian":
            if self.family not in ef.FAMILIES:
                raise ConfigError(
                    "non-gaussian mode needs a noise family from "
                    f"{ef.FAMILIES}, got {self.family!r}")
            if self.baseline:
                raise ConfigError("the baseline estimator is Gaussian only")
        if not isinstance(self.degree, int) or self.degree < 1:
            raise ConfigError(f"degree must be a positive int, got {self.degree!r}")
        if not self.laplace_b > 0:
            raise ConfigError(f"Laplace scale must be positive, got {self.laplace_b}")
        if self.kl_z_weight < 0 or self.kl_lambda_weight < 0:
            raise ConfigError("KL weights must be nonnegative")
        if not self.obs_var > 0:
            raise ConfigError(f"observation variance must be positive, got {self.obs_var}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def config_from_dict(d: dict) -> ModeConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"model config must be a mapping, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(ModeConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown model config fields: {unknown}")
    return ModeConfig(**d)


# ---------------------------------------------------------------------------
# coefficient layout

@lru_cache(maxsize=None)
def _mask(ell: int, degree: int) -> np.ndarray:
    """(ell, B) 0/1 matrix; row i marks monomials supported on z_<i."""
    expts = exponent_tuples(ell, degree)
    m = np.zeros((ell, len(expts)))
    for i in range(ell):
        for j, e in enumerate(expts):
            if all(p == 0 for p in e[i:]):
                m[i, j] = 1.0
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _prefix_slots(ell: int, degree: int) -> tuple:
    """Full-basis column of each prefix-basis monomial, per node."""
    full = {e: j for j, e in enumerate(exponent_tuples(ell, degree))}
    out = []
    for i in range(ell):
        pad = (0,) * (ell - i)
        out.append(tuple(full[e + pad] for e in exponent_tuples(i, degree)))
    return tuple(out)


# ---------------------------------------------------------------------------
# initialization

def _linear_init(rng, fan_in: int, fan_out: int):
    lim = 1.0 / np.sqrt(max(fan_in, 1))
    return (rng.uniform(-lim, lim, size=(fan_in, fan_out)),
            rng.uniform(-lim, lim, size=fan_out))


def _hidden_stack(p: dict, rng, name: str, fan_in: int) -> None:
    sizes = (fan_in, _WIDTH, _WIDTH, _WIDTH)
    for k in range(3):
        p[f"{name}_w{k + 1}"], p[f"{name}_b{k + 1}"] = _linear_init(
            rng, sizes[k], sizes[k + 1])


def init_params(ell: int, envs: int, config: ModeConfig,
                rng: np.random.Generator) -> dict:
    """Fresh weights for an ell-node model over `envs` segments.

    Hidden layers get uniform fan-in initialization.  Read-out layers whose
    untrained output has a pinned meaning start at zero: the coefficient
    network (empty tables), the posterior mean heads (flat read-out), and
    the non-Gaussian head pair.  The posterior-scale half of the lambda
    network starts near 0.05 instead of softplus(0).
    """
    if ell < 1:
        raise ValidationError(f"need at least one node, got {ell}")
    if envs < 1:
        raise ValidationError(f"need at least one segment, got {envs}")
    gaussian = config.mode == "gaussian-analytic"
    B = basis_size(ell, config.degree)
    p: dict[str, np.ndarray] = {}
    _hidden_stack(p, rng, "enc", ell + envs)
    for i in range(ell):
        fan = _WIDTH + (i if gaussian else 0)
        w, b = _linear_init(rng, fan, 2)
        # the posterior read-out starts flat so untrained parameters score
        # the matching floor; the first update un-zeroes it
        if gaussian:
            w[:, 0] = 0.0
            b[0] = 0.0
        else:
            w[:] = 0.0
            b[:] = 0.0
        p[f"enc_h{i + 1}_w"], p[f"enc_h{i + 1}_b"] = w, b
    _hidden_stack(p, rng, "dec", ell)
    p["dec_w4"], p["dec_b4"] = _linear_init(rng, _WIDTH, ell)
    _hidden_stack(p, rng, "pri", envs)
    p["pri_w4"], p["pri_b4"] = _linear_init(rng, _WIDTH, 2 * ell)
    if not config.baseline:
        if gaussian:
            _hidden_stack(p, rng, "coef", envs)
            p["coef_w4"] = np.zeros((_WIDTH, ell * B))
            p["coef_b4"] = np.zeros(ell * B)
        else:
            _hidden_stack(p, rng, "lam", envs)
            p["lam_w4"] = np.zeros((_WIDTH, 2 * ell * B))
            b = np.zeros(2 * ell * B)
            b[ell * B:] = -3.0
            p["lam_b4"] = b
    if config.learn_obs_var:
        raw = np.log(np.expm1(max(config.obs_var - _FLOOR, 1e-8)))
        p["dec_rawvar"] = np.full((1, 1), raw)
    return p


# ---------------------------------------------------------------------------
# forward pieces

def _leaves(params: dict):
    """Tape leaves for a weight dict; pass-through when already tensors."""
    first = next(iter(params.values()))
    if isinstance(first, ad.Tensor):
        return params, first.tape
    tape = ad.Tape()
    return {k: tape.leaf(np.asarray(v, dtype=np.float64))
            for k, v in params.items()}, tape


def _arr(v):
    return v.data if isinstance(v, ad.Tensor) else np.asarray(v)


def _dims(params) -> tuple[int, int]:
    ell = int(_arr(params["dec_b4"]).size)
    envs = int(_arr(params["enc_w1"]).shape[0]) - ell
    return ell, envs


def _trunk(leaves, name: str, inp):
    h = inp
    for k in (1, 2, 3):
        h = ad.leaky_relu(
            ad.matmul(h, leaves[f"{name}_w{k}"]) + leaves[f"{name}_b{k}"],
            _SLOPE)
    return h


def _decode(leaves, z):
    h = _trunk(leaves, "dec", z)
    return ad.matmul(h, leaves["dec_w4"]) + leaves["dec_b4"]


def _prior_raw(leaves, envs: int):
    h = _trunk(leaves, "pri", np.eye(envs))
    return ad.matmul(h, leaves["pri_w4"]) + leaves["pri_b4"]


def _coef_tables(leaves, config: ModeConfig, ell: int, envs: int):
    """Masked deterministic coefficient tables, (envs, ell * B)."""
    h = _trunk(leaves, "coef", np.eye(envs))
    raw = ad.matmul(h, leaves["coef_w4"]) + leaves["coef_b4"]
    return ad.mul(raw, _mask(ell, config.degree).reshape(1, -1))


def _lam_posterior(leaves, config: ModeConfig, ell: int, envs: int):
    """Laplace posterior (masked loc, scale) over the tables, per segment."""
    B = basis_size(ell, config.degree)
    h = _trunk(leaves, "lam", np.eye(envs))
    raw = ad.matmul(h, leaves["lam_w4"]) + leaves["lam_b4"]
    loc = ad.mul(ad.take_cols(raw, 0, ell * B),
                 _mask(ell, config.degree).reshape(1, -1))
    scale = ad.softplus(ad.take_cols(raw, ell * B, 2 * ell * B)) + _FLOOR
    return loc, scale


def _family_link(family: str, raw1, raw2):
    if family == "gaussian":
        return raw1, ad.softplus(raw2) + _FLOOR
    return ad.softplus(raw1) + _FLOOR, ad.softplus(raw2) + _FLOOR


def _node_params(pri_rows, i: int, family: str):
    raw1 = ad.take_cols(pri_rows, 2 * i, 2 * i + 1)
    raw2 = ad.take_cols(pri_rows, 2 * i + 1, 2 * i + 2)
    return _family_link(family, raw1, raw2)


def _monomial_col(expt: tuple, z_cols: list, cache: dict):
    col = cache.get(expt)
    if col is not None:
        return col
    col = None
    for v, pw in enumerate(expt):
        if pw == 0:
            continue
        t = z_cols[v] if pw == 1 else ad.power(z_cols[v], float(pw))
        col = t if col is None else ad.mul(col, t)
    cache[expt] = col
    return col


def _prior_conditionals(config: ModeConfig, ell: int, pri_rows, lam_rows,
                        z_cols: list):
    """Per-node Gaussian prior (mean, var) at the supplied latent columns."""
    expts = exponent_tuples(ell, config.degree)
    B = len(expts)
    slots = _prefix_slots(ell, config.degree)
    cache: dict = {}
    mus, vars_ = [], []
    for i in range(ell):
        m, v = _node_params(pri_rows, i, "gaussian")
        if lam_rows is not None:
            for j in slots[i]:
                coef = ad.take_cols(lam_rows, i * B + j, i * B + j + 1)
                m = m + ad.mul(coef, _monomial_col(expts[j], z_cols, cache))
        mus.append(m)
        vars_.append(v)
    return mus, vars_


# ---------------------------------------------------------------------------
# batch plumbing

def _as_batch(x, u, ell: int, envs: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != ell:
        raise ShapeError(f"observations must be (rows, {ell}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValidationError("need at least one observation row")
    u = _labels(u, x.shape[0], envs)
    return x, u


def _labels(u, rows: int, envs: int):
    u = np.atleast_1d(np.asarray(u))
    if not np.issubdtype(u.dtype, np.integer):
        raise ValidationError("segment labels must be integers")
    if u.size == 1 and rows > 1:
        u = np.repeat(u, rows)
    if u.shape != (rows,):
        raise ShapeError(f"labels must align with rows: {u.shape} vs {rows}")
    if u.min() < 0 or u.max() >= envs:
        raise ValidationError(f"segment labels must lie in [0, {envs})")
    return u.astype(np.intp)


def _onehot(u, envs: int) -> np.ndarray:
    oh = np.zeros((u.size, envs))
    oh[np.arange(u.size), u] = 1.0
    return oh


def _as_cols(z, ell: int) -> list:
    if isinstance(z, ad.Tensor):
        if z.ndim != 2 or z.shape[1] != ell:
            raise ShapeError(f"latents must be (rows, {ell}), got {z.shape}")
        return [ad.take_cols(z, i, i + 1) for i in range(ell)]
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != ell:
        raise ShapeError(f"latents must be (rows, {ell}), got {z.shape}")
    return [ad.Tensor(z[:, i:i + 1]) for i in range(ell)]


def _family_mean_np(family: str, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    if family in ("gaussian", "inverse_gaussian"):
        return p1.copy()
    if family == "gamma":
        return p1 / p2
    if family == "beta":
        return p1 / (p1 + p2)
    # inverse-gamma has no mean below shape 1; fall back to the mode there
    return np.where(p1 > 1.0, p2 / np.maximum(p1 - 1.0, 1e-12),
                    p2 / (p1 + 1.0))


# ---------------------------------------------------------------------------
# densities and divergences on the tape

def _gauss_logpdf_t(x, m, v):
    return -0.5 * (_LOG_2PI + ad.tlog(v)) - ad.div(ad.square(x - m), 2.0 * v)


def _nat_t(family: str, p1, p2):
    if family == "gaussian":
        return ad.div(p1, p2), ad.div(-0.5, p2)
    if family == "gamma":
        return p1 - 1.0, ad.neg(p2)
    if family == "beta":
        return p1 - 1.0, p2 - 1.0
    if family == "inverse_gaussian":
        return ad.div(ad.neg(p2), 2.0 * ad.square(p1)), ad.mul(p2, -0.5)
    if family == "inverse_gamma":
        return ad.neg(p1) - 1.0, ad.neg(p2)
    raise ValidationError(f"unknown family '{family}'")


def _lognorm_t(family: str, p1, p2):
    if family == "gaussian":
        return ad.div(ad.square(p1), 2.0 * p2) + 0.5 * (_LOG_2PI + ad.tlog(p2))
    if family in ("gamma", "inverse_gamma"):
        return ad.lgamma(p1) - ad.mul(p1, ad.tlog(p2))
    if family == "beta":
        return ad.lgamma(p1) + ad.lgamma(p2) - ad.lgamma(p1 + p2)
    if family == "inverse_gaussian":
        return ad.neg(ad.div(p2, p1)) - 0.5 * ad.tlog(p2)
    raise ValidationError(f"unknown family '{family}'")


def _estats_t(family: str, p1, p2):
    if family == "gaussian":
        return p1, ad.square(p1) + p2
    if family == "gamma":
        return ad.digamma(p1) - ad.tlog(p2), ad.div(p1, p2)
    if family == "beta":
        tot = ad.digamma(p1 + p2)
        return ad.digamma(p1) - tot, ad.digamma(p2) - tot
    if family == "inverse_gaussian":
        return p1, ad.div(1.0, p1) + ad.div(1.0, p2)
    if family == "inverse_gamma":
        return ad.tlog(p2) - ad.digamma(p1), ad.div(p1, p2)
    raise ValidationError(f"unknown family '{family}'")


def _kl_t(family: str, q1, q2, p1, p2):
    """Analytic within-family KL(q || p), elementwise."""
    e1, e2 = _nat_t(family, q1, q2)
    f1, f2 = _nat_t(family, p1, p2)
    t1, t2 = _estats_t(family, q1, q2)
    return (ad.mul(e1 - f1, t1) + ad.mul(e2 - f2, t2)
            - _lognorm_t(family, q1, q2) + _lognorm_t(family, p1, p2))


def _family_logpdf_t(family: str, p1, p2, n):
    e1, e2 = _nat_t(family, p1, p2)
    if family == "gaussian":
        t1, t2 = n, ad.square(n)
    elif family == "gamma":
        t1, t2 = ad.tlog(n), n
    elif family == "beta":
        t1, t2 = ad.tlog(n), ad.tlog(1.0 - n)
    elif family == "inverse_gaussian":
        t1, t2 = n, ad.div(1.0, n)
    elif family == "inverse_gamma":
        t1, t2 = ad.tlog(n), ad.div(1.0, n)
    else:
        raise ValidationError(f"unknown family '{family}'")
    lp = ad.mul(e1, t1) + ad.mul(e2, t2) - _lognorm_t(family, p1, p2)
    if family == "inverse_gaussian":
        lp = lp + (-0.5 * _LOG_2PI - 1.5 * ad.tlog(n))
    return lp


def _kl_laplace_t(loc, scale, b: float):
    d = ad.absolute(loc)
    decay = ad.mul(scale, ad.texp(ad.neg(ad.div(d, scale))))
    return (math.log(b) - ad.tlog(scale)) + ad.div(decay + d, b) - 1.0


# ---------------------------------------------------------------------------
# the estimator's four public operations

def posterior_sample(x, u, params, config: ModeConfig, rng=None, *,
                     mean_only: bool = False):
    """Draw z ~ q(z | x, u) on the tape.

    Returns (z, terms): an (N, ell) tensor and the per-node posterior pieces
    the objective needs.  ``mean_only`` replaces every draw with its mean,
    which is the deterministic read-out used for evaluation.
    """
    if not isinstance(config, ModeConfig):
        raise ConfigError("config must be a ModeConfig")
    leaves, tape = _leaves(params)
    ell, envs = _dims(leaves)
    x, u = _as_batch(x, u, ell, envs)
    if rng is None and not mean_only:
        raise ValidationError("sampling needs a random generator")
    trunk = _trunk(leaves, "enc", np.concatenate([x, _onehot(u, envs)], axis=1))
    terms: dict = {"tape": tape, "leaves": leaves}

    if config.mode == "gaussian-analytic":
        z_cols, means, vars_ = [], [], []
        for i in range(ell):
            head_in = trunk if i == 0 else ad.concat([trunk] + z_cols, axis=1)
            raw = (ad.matmul(head_in, leaves[f"enc_h{i + 1}_w"])
                   + leaves[f"enc_h{i + 1}_b"])
            m = ad.take_cols(raw, 0, 1)
            v = ad.softplus(ad.take_cols(raw, 1, 2)) + _FLOOR
            z_i = m if mean_only else ef.reparam_gaussian(m, v, rng)
            z_cols.append(z_i)
            means.append(m)
            vars_.append(v)
        terms.update(z_cols=z_cols, means=means, vars=vars_)
    else:
        loc, scale = _lam_posterior(leaves, config, ell, envs)
        if mean_only:
            lam = loc
        else:
            lam = ad.mul(ef.reparam_laplace(loc, scale, rng),
                         _mask(ell, config.degree).reshape(1, -1))
        lam_rows = ad.gather_rows(lam, u)
        n_cols, n_params = [], []
        for i in range(ell):
            raw = (ad.matmul(trunk, leaves[f"enc_h{i + 1}_w"])
                   + leaves[f"enc_h{i + 1}_b"])
            p1, p2 = _family_link(config.family, ad.take_cols(raw, 0, 1),
                                  ad.take_cols(raw, 1, 2))
            if mean_only:
                n_i = ad.Tensor(_family_mean_np(config.family, p1.data, p2.data))
            else:
                n_i = ef.reparam_arr(config.family, p1, p2, rng)
            n_cols.append(n_i)
            n_params.append((p1, p2))
        expts = exponent_tuples(ell, config.degree)
        B = len(expts)
        slots = _prefix_slots(ell, config.degree)
        cache: dict = {}
        z_cols = []
        for i in range(ell):
            z_i = n_cols[i]
            for j in slots[i]:
                coef = ad.take_cols(lam_rows, i * B + j, i * B + j + 1)
                z_i = z_i + ad.mul(coef, _monomial_col(expts[j], z_cols, cache))
            z_cols.append(z_i)
        terms.update(z_cols=z_cols, n_cols=n_cols, n_params=n_params,
                     lam=lam, lam_loc=loc, lam_scale=scale, lam_rows=lam_rows)

    z = ad.concat(z_cols, axis=1)
    terms["z"] = z
    return z, terms


def reconstruct(x, u, params, config: ModeConfig, rng=None, *,
                mean_only: bool = True) -> np.ndarray:
    """Decode the inferred latents back to observation space (numpy out)."""
    z, terms = posterior_sample(x, u, params, config, rng, mean_only=mean_only)
    return _decode(terms["leaves"], z).data.copy()


def prior_logdensity(value, u, params, config: ModeConfig):
    """log p(.|u) per row, on the tape.

    Gaussian mode takes latent rows and chains the conditional Gaussians in
    causal order.  Non-Gaussian mode takes a (tables, noise-rows) pair and
    returns the Laplace log-density of the valid table entries plus the
    family log-density of the noise.
    """
    if not isinstance(config, ModeConfig):
        raise ConfigError("config must be a ModeConfig")
    leaves, _ = _leaves(params)
    ell, envs = _dims(leaves)

    if config.mode == "gaussian-analytic":
        z_cols = _as_cols(value, ell)
        rows = z_cols[0].shape[0]
        u = _labels(u, rows, envs)
        pri_rows = ad.gather_rows(_prior_raw(leaves, envs), u)
        lam_rows = None
        if not config.baseline:
            lam_rows = ad.gather_rows(_coef_tables(leaves, config, ell, envs), u)
        mus, vars_ = _prior_conditionals(config, ell, pri_rows, lam_rows, z_cols)
        total = None
        for i in range(ell):
            term = _gauss_logpdf_t(z_cols[i], mus[i], vars_[i])
            total = term if total is None else total + term
        return ad.reshape(total, (-1,))

    if not (isinstance(value, tuple) and len(value) == 2):
        raise ValidationError(
            "non-gaussian mode scores a (tables, noise) pair")
    lam, n = value
    n_cols = _as_cols(n, ell)
    rows = n_cols[0].shape[0]
    u = _labels(u, rows, envs)
    B = basis_size(ell, config.degree)
    if not isinstance(lam, ad.Tensor):
        lam = ad.Tensor(np.atleast_2d(np.asarray(lam, dtype=np.float64)))
    if lam.ndim != 2 or lam.shape[1] != ell * B:
        raise ShapeError(f"tables must have {ell * B} columns, got {lam.shape}")
    b = config.laplace_b
    lp_entry = ad.mul(-math.log(2.0 * b) - ad.mul(ad.absolute(lam), 1.0 / b),
                      _mask(ell, config.degree).reshape(1, -1))
    total = ad.tsum(lp_entry, axis=1, keepdims=True)
    pri_rows = ad.gather_rows(_prior_raw(leaves, envs), u)
    for i in range(ell):
        p1, p2 = _node_params(pri_rows, i, config.family)
        total = total + _family_logpdf_t(config.family, p1, p2, n_cols[i])
    return ad.reshape(total, (-1,))


def elbo(batch, params, config: ModeConfig, rng, kl_weight: float = 1.0,
         n_total=None):
    """Single-draw objective (mean over the batch) plus a term breakdown.

    ``kl_weight`` is the warmup multiplier on the latent KL block.  Terms
    tied to whole segments rather than rows (the coefficient-table KL, or
    the Laplace log-prior in Gaussian mode) are divided by ``n_total``, the
    size of the full training set, so batch objectives stay unbiased
    estimates of the per-row dataset objective.  The reported ``elbo`` entry
    is the unweighted bound; ``objective`` is what the tensor holds.
    """
    x, u = batch
    leaves, tape = _leaves(params)
    ell, envs = _dims(leaves)
    x, u = _as_batch(x, u, ell, envs)
    rows = x.shape[0]
    if n_total is None:
        n_total = rows
    n_total = float(n_total)
    if not n_total > 0:
        raise ValidationError(f"n_total must be positive, got {n_total}")

    terms: dict = {}
    try:
        obj = _elbo_body(x, u, leaves, config, rng, kl_weight, n_total, terms)
    except NonFiniteError as e:
        raise NonFiniteError(
            f"{e}; terms computed before the failure: {terms}") from None
    bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
    if bad:
        raise NonFiniteError(
            f"non-finite objective, offending terms {bad}; full breakdown {terms}")
    return obj, terms


def _elbo_body(x, u, leaves, config, rng, kl_weight, n_total, terms):
    ell, envs = _dims(leaves)
    rows = x.shape[0]
    z, post = posterior_sample(x, u, leaves, config, rng)
    xhat = _decode(leaves, z)
    if config.learn_obs_var:
        ovar = ad.softplus(leaves["dec_rawvar"]) + _FLOOR
        log_ovar = ad.tlog(ovar)
    else:
        ovar = config.obs_var
        log_ovar = float(np.log(config.obs_var))
    lp_x = (-0.5 * (_LOG_2PI + log_ovar)
            - ad.div(ad.square(ad.sub(x, xhat)), 2.0 * ovar))
    recon = ad.tsum(lp_x) * (1.0 / rows)
    terms["recon"] = float(recon.data)

    if config.mode == "gaussian-analytic":
        pri_rows = ad.gather_rows(_prior_raw(leaves, envs), u)
        grid = None
        lam_rows = None
        if not config.baseline:
            grid = _coef_tables(leaves, config, ell, envs)
            lam_rows = ad.gather_rows(grid, u)
        mus, vars_p = _prior_conditionals(config, ell, pri_rows, lam_rows,
                                          post["z_cols"])
        kl = None
        for i in range(ell):
            mq, vq = post["means"][i], post["vars"][i]
            node = 0.5 * (ad.tlog(ad.div(vars_p[i], vq))
                          + ad.div(vq + ad.square(mq - mus[i]), vars_p[i])
                          - 1.0)
            kl = node if kl is None else kl + node
        kl_z = ad.tsum(kl) * (1.0 / rows)
        obj = recon - (kl_weight * config.kl_z_weight) * kl_z
        logprior = 0.0
        if grid is not None:
            b = config.laplace_b
            lp_lam = ad.mul(-math.log(2.0 * b) - ad.mul(ad.absolute(grid), 1.0 / b),
                            _mask(ell, config.degree).reshape(1, -1))
            logprior_t = ad.tsum(lp_lam) * (1.0 / n_total)
            obj = obj + config.kl_lambda_weight * logprior_t
            logprior = float(logprior_t.data)
        terms.update(kl_z=float(kl_z.data), kl_lambda=0.0,
                     logprior_lambda=logprior)
    else:
        pri_rows = ad.gather_rows(_prior_raw(leaves, envs), u)
        kl = None
        for i in range(ell):
            q1, q2 = post["n_params"][i]
            p1, p2 = _node_params(pri_rows, i, config.family)
            node = _kl_t(config.family, q1, q2, p1, p2)
            kl = node if kl is None else kl + node
        kl_z = ad.tsum(kl) * (1.0 / rows)
        kl_entry = ad.mul(_kl_laplace_t(post["lam_loc"], post["lam_scale"],
                                        config.laplace_b),
                          _mask(ell, config.degree).reshape(1, -1))
        kl_lam = ad.tsum(kl_entry) * (1.0 / n_total)
        obj = (recon - (kl_weight * config.kl_z_weight) * kl_z
               - config.kl_lambda_weight * kl_lam)
        terms.update(kl_z=float(kl_z.data), kl_lambda=float(kl_lam.data),
                     logprior_lambda=0.0)

    terms["elbo"] = terms["recon"] - terms["kl_z"] - terms["kl_lambda"]
    terms["objective"] = float(obj.data)
    terms["kl_weight"] = float(kl_weight)
    return obj


def lambda_tables(params, config: ModeConfig) -> np.ndarray:
    """Coefficient point estimates per segment, shape (envs, ell, B)."""
    leaves, _ = _leaves(params)
    ell, envs = _dims(leaves)
    B = basis_size(ell, config.degree)
    if config.baseline:
        return np.zeros((envs, ell, B))
    if config.mode == "gaussian-analytic":
        grid = _coef_tables(leaves, config, ell, envs)
    else:
        grid, _ = _lam_posterior(leaves, config, ell, envs)
    return grid.data.reshape(envs, ell, B).copy()


def extract_coefficients(params, config: ModeConfig, envs=None) -> list:
    """Per-node tables in the prefix basis, one (envs, B_i) array per node.

    The output plugs straight into metrics.extract_adjacency and mirrors the
    layout of the generator's coefficient tables.
    """
    grid = lambda_tables(params, config)
    ell = grid.shape[1]
    if envs is None:
        rows = np.arange(grid.shape[0])
    else:
        rows = np.atleast_1d(np.asarray(envs, dtype=np.intp))
        if rows.size and (rows.min() < 0 or rows.max() >= grid.shape[0]):
            raise ValidationError(
                f"segment indices must lie in [0, {grid.shape[0]})")
    slots = _prefix_slots(ell, config.degree)
    return [grid[rows, i][:, list(slots[i])] for i in range(ell)]


def prior_tables(params, config: ModeConfig) -> np.ndarray:
    """Noise parameters the prior network assigns, shape (envs, ell, 2)."""
    leaves, _ = _leaves(params)
    ell, envs = _dims(leaves)
    raw = _prior_raw(leaves, envs)
    fam = "gaussian" if config.mode == "gaussian-analytic" else config.family
    out = np.empty((envs, ell, 2))
    for i in range(ell):
        p1, p2 = _node_params(raw, i, fam)
        out[:, i, 0] = p1.data[:, 0]
        out[:, i, 1] = p2.data[:, 0]
    return out
