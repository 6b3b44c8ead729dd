"""Two-parameter exponential families used as structural noise.

Five families share one interface: Gaussian (mean, variance), Gamma
(shape, rate), Beta (alpha, beta), InverseGaussian (mean, shape) and
InverseGamma (shape, scale).  Each exposes sufficient statistics, natural
parameters, log normalizer and base measure so that

    log_pdf(n) == eta . T(n) - A + log h(n)

holds to float precision, plus plain sampling, pathwise (reparameterized)
sampling on an autodiff tape, and analytic same-family KL divergences via
the exponential-family identity KL = (eta1 - eta2) . E1[T] - A1 + A2.

The Laplace distribution also lives here (coefficient prior/posterior in
the estimator); it is not one of the noise families.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import autodiff as ad
from .errors import (FamilyMismatchError, SupportError, UnsupportedGradientError,
                     ValidationError)
from .special import betainc_grads, gammainc_grad_shape

FAMILIES = ("gaussian", "gamma", "beta", "inverse_gaussian", "inverse_gamma")

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ExpFamParams:
    """One distribution: a family tag plus its two source parameters."""

    family: str
    p1: float
    p2: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family '{self.family}'")
        p1, p2 = float(self.p1), float(self.p2)
        if not (np.isfinite(p1) and np.isfinite(p2)):
            raise ValidationError("parameters must be finite")
        if self.family == "gaussian":
            if p2 <= 0.0:
                raise ValidationError("gaussian variance must be positive")
        else:
            if p1 <= 0.0 or p2 <= 0.0:
                raise ValidationError(
                    f"{self.family} parameters must be positive, got ({p1}, {p2})")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)


def _check_support(family: str, n: np.ndarray) -> None:
    if family == "gaussian":
        return
    if family == "beta":
        if np.any(n <= 0.0) or np.any(n >= 1.0):
            raise SupportError("beta support is the open interval (0, 1)")
    else:
        if np.any(n <= 0.0):
            raise SupportError(f"{family} support is the positive reals")


def log_pdf(params: ExpFamParams, n):
    """Log density at n (scalar or array); raises SupportError off-support."""
    n = np.asarray(n, dtype=np.float64)
    _check_support(params.family, n)
    out = log_pdf_arr(params.family, params.p1, params.p2, n)
    return float(out) if out.ndim == 0 else out


def log_pdf_arr(family: str, p1, p2, n) -> np.ndarray:
    """Vectorized log density without support checks (internal fast path)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if family == "gaussian":
        return -0.5 * (_LOG_2PI + np.log(p2)) - (n - p1) ** 2 / (2.0 * p2)
    if family == "gamma":
        return p1 * np.log(p2) - _sp.gammaln(p1) + (p1 - 1.0) * np.log(n) - p2 * n
    if family == "beta":
        return ((p1 - 1.0) * np.log(n) + (p2 - 1.0) * np.log1p(-n)
                - _sp.betaln(p1, p2))
    if family == "inverse_gaussian":
        return (0.5 * (np.log(p2) - _LOG_2PI - 3.0 * np.log(n))
                - p2 * (n - p1) ** 2 / (2.0 * p1 ** 2 * n))
    if family == "inverse_gamma":
        return (p1 * np.log(p2) - _sp.gammaln(p1)
                - (p1 + 1.0) * np.log(n) - p2 / n)
    raise ValidationError(f"unknown family '{family}'")


def sufficient_stats(family: str, n):
    """The two sufficient statistics T(n), ordered to match natural_params."""
    n = np.asarray(n, dtype=np.float64)
    _check_support(family, n)
    if family == "gaussian":
        return n, n ** 2
    if family == "gamma":
        return np.log(n), n
    if family == "beta":
        return np.log(n), np.log1p(-n)
    if family == "inverse_gaussian":
        return n, 1.0 / n
    if family == "inverse_gamma":
        return np.log(n), 1.0 / n
    raise ValidationError(f"unknown family '{family}'")


def natural_params(params: ExpFamParams) -> tuple[float, float]:
    p1, p2 = params.p1, params.p2
    f = params.family
    if f == "gaussian":
        return p1 / p2, -0.5 / p2
    if f == "gamma":
        return p1 - 1.0, -p2
    if f == "beta":
        return p1 - 1.0, p2 - 1.0
    if f == "inverse_gaussian":
        return -p2 / (2.0 * p1 ** 2), -p2 / 2.0
    if f == "inverse_gamma":
        return -p1 - 1.0, -p2
    raise ValidationError(f"unknown family '{f}'")


def log_normalizer(params: ExpFamParams) -> float:
    p1, p2 = params.p1, params.p2
    f = params.family
    if f == "gaussian":
        return p1 ** 2 / (2.0 * p2) + 0.5 * (_LOG_2PI + np.log(p2))
    if f == "gamma":
        return float(_sp.gammaln(p1)) - p1 * np.log(p2)
    if f == "beta":
        return float(_sp.betaln(p1, p2))
    if f == "inverse_gaussian":
        return -p2 / p1 - 0.5 * np.log(p2)
    if f == "inverse_gamma":
        return float(_sp.gammaln(p1)) - p1 * np.log(p2)
    raise ValidationError(f"unknown family '{f}'")


def log_base_measure(family: str, n):
    n = np.asarray(n, dtype=np.float64)
    if family == "gaussian":
        return np.zeros_like(n)
    if family == "inverse_gaussian":
        return -0.5 * _LOG_2PI - 1.5 * np.log(n)
    if family in ("gamma", "beta", "inverse_gamma"):
        return np.zeros_like(n)
    raise ValidationError(f"unknown family '{family}'")


def mean(params: ExpFamParams) -> float:
    p1, p2 = params.p1, params.p2
    f = params.family
    if f == "gaussian":
        return p1
    if f == "gamma":
        return p1 / p2
    if f == "beta":
        return p1 / (p1 + p2)
    if f == "inverse_gaussian":
        return p1
    if f == "inverse_gamma":
        if p1 <= 1.0:
            raise ValidationError("inverse-gamma mean needs shape > 1")
        return p2 / (p1 - 1.0)
    raise ValidationError(f"unknown family '{f}'")


def variance(params: ExpFamParams) -> float:
    p1, p2 = params.p1, params.p2
    f = params.family
    if f == "gaussian":
        return p2
    if f == "gamma":
        return p1 / p2 ** 2
    if f == "beta":
        s = p1 + p2
        return p1 * p2 / (s ** 2 * (s + 1.0))
    if f == "inverse_gaussian":
        return p1 ** 3 / p2
    if f == "inverse_gamma":
        if p1 <= 2.0:
            raise ValidationError("inverse-gamma variance needs shape > 2")
        return p2 ** 2 / ((p1 - 1.0) ** 2 * (p1 - 2.0))
    raise ValidationError(f"unknown family '{f}'")


def expected_stats(params: ExpFamParams) -> tuple[float, float]:
    """E[T(n)] under the distribution itself (for analytic KLs)."""
    p1, p2 = params.p1, params.p2
    f = params.family
    if f == "gaussian":
        return p1, p1 ** 2 + p2
    if f == "gamma":
        return float(_sp.digamma(p1)) - np.log(p2), p1 / p2
    if f == "beta":
        d = float(_sp.digamma(p1 + p2))
        return float(_sp.digamma(p1)) - d, float(_sp.digamma(p2)) - d
    if f == "inverse_gaussian":
        return p1, 1.0 / p1 + 1.0 / p2
    if f == "inverse_gamma":
        return np.log(p2) - float(_sp.digamma(p1)), p1 / p2
    raise ValidationError(f"unknown family '{f}'")


def sample(params: ExpFamParams, rng: np.random.Generator, size=None):
    """Plain (non-differentiable) sampling."""
    return sample_arr(params.family, params.p1, params.p2, rng, size)


def sample_arr(family: str, p1, p2, rng: np.random.Generator, size=None):
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if family == "gaussian":
        return rng.normal(p1, np.sqrt(p2), size=size)
    if family == "gamma":
        return rng.gamma(p1, 1.0 / p2, size=size)
    if family == "beta":
        return rng.beta(p1, p2, size=size)
    if family == "inverse_gaussian":
        return rng.wald(p1, p2, size=size)
    if family == "inverse_gamma":
        return 1.0 / rng.gamma(p1, 1.0 / p2, size=size)
    raise ValidationError(f"unknown family '{family}'")


def kl_divergence(p: ExpFamParams, q: ExpFamParams) -> float:
    """Analytic KL(p || q) within one family."""
    if p.family != q.family:
        raise FamilyMismatchError(
            f"KL between different families: {p.family} vs {q.family}")
    e1, e2 = natural_params(p)
    f1, f2 = natural_params(q)
    t1, t2 = expected_stats(p)
    kl = (e1 - f1) * t1 + (e2 - f2) * t2 - log_normalizer(p) + log_normalizer(q)
    return float(kl)


def kl_divergence_mc(p: ExpFamParams, q: ExpFamParams,
                     rng: np.random.Generator, n_samples: int = 100_000):
    """Monte Carlo KL(p || q) with its standard error (verification route)."""
    if p.family != q.family:
        raise FamilyMismatchError(
            f"KL between different families: {p.family} vs {q.family}")
    # within one family the base measures cancel, so the log ratio is
    # (eta_p - eta_q) . T(n) + A_q - A_p, with T computed in a form that
    # cannot underflow (beta draws are represented as a gamma ratio so
    # log(1 - n) never hits a rounded-to-1 sample)
    if p.family == "beta":
        g1 = rng.gamma(p.p1, 1.0, size=n_samples)
        g2 = rng.gamma(p.p2, 1.0, size=n_samples)
        tot = np.log(g1 + g2)
        t1, t2 = np.log(g1) - tot, np.log(g2) - tot
    else:
        draws = sample(p, rng, size=n_samples)
        t1, t2 = sufficient_stats(p.family, draws)
    e1, e2 = natural_params(p)
    f1, f2 = natural_params(q)
    ratio = ((e1 - f1) * t1 + (e2 - f2) * t2
             - log_normalizer(p) + log_normalizer(q))
    return float(ratio.mean()), float(ratio.std(ddof=1) / np.sqrt(n_samples))


# ---------------------------------------------------------------------------
# Laplace (coefficient prior/posterior; not a structural-noise family)

def laplace_log_pdf(loc, scale, x) -> np.ndarray:
    loc = np.asarray(loc, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return -np.log(2.0 * scale) - np.abs(x - loc) / scale


def kl_laplace(loc1, scale1, loc2, scale2) -> np.ndarray:
    """KL( Laplace(loc1, scale1) || Laplace(loc2, scale2) ), elementwise."""
    loc1 = np.asarray(loc1, dtype=np.float64)
    scale1 = np.asarray(scale1, dtype=np.float64)
    d = np.abs(loc1 - loc2)
    return (np.log(scale2 / scale1)
            + (scale1 * np.exp(-d / scale1) + d) / scale2 - 1.0)


# ---------------------------------------------------------------------------
# reparameterized sampling on a tape

def _clip_positive(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 1e-12)


def reparam_gaussian(mean_t: ad.Tensor, var_t: ad.Tensor,
                     rng: np.random.Generator) -> ad.Tensor:
    """Location-scale: x = mean + sqrt(var) * eps."""
    mu, var = mean_t.data, var_t.data
    shape = np.broadcast_shapes(mu.shape, var.shape)
    eps = rng.standard_normal(shape)
    sd = np.sqrt(var)
    value = mu + sd * eps
    return ad.custom_elementwise(value, [
        (mean_t, np.ones(shape)),
        (var_t, np.broadcast_to(eps / (2.0 * sd), shape)),
    ])


def reparam_gamma(shape_t: ad.Tensor, rate_t: ad.Tensor,
                  rng: np.random.Generator) -> ad.Tensor:
    """Implicit reparameterization: d(x)/d(shape) = -dF/dshape / pdf; the
    rate channel is exact by the scale property (dx/drate = -x/rate)."""
    a, r = shape_t.data, rate_t.data
    shape = np.broadcast_shapes(a.shape, r.shape)
    x = _clip_positive(rng.gamma(np.broadcast_to(a, shape),
                                 1.0 / np.broadcast_to(r, shape)))
    ab = np.broadcast_to(a, shape)
    rb = np.broadcast_to(r, shape)
    u = rb * x
    dF_da = gammainc_grad_shape(ab, u)
    log_pdf_x = (ab * np.log(rb) - _sp.gammaln(ab)
                 + (ab - 1.0) * np.log(x) - u)
    dx_da = -dF_da / np.exp(log_pdf_x)
    return ad.custom_elementwise(x, [
        (shape_t, dx_da),
        (rate_t, -x / rb),
    ])


def reparam_beta(a_t: ad.Tensor, b_t: ad.Tensor,
                 rng: np.random.Generator) -> ad.Tensor:
    """Implicit reparameterization through the incomplete-beta derivative."""
    a, b = a_t.data, b_t.data
    shape = np.broadcast_shapes(a.shape, b.shape)
    ab = np.broadcast_to(a, shape)
    bb = np.broadcast_to(b, shape)
    x = np.clip(rng.beta(ab, bb), 1e-12, 1.0 - 1e-12)
    ga, gb = betainc_grads(ab, bb, x)
    pdf = np.exp((ab - 1.0) * np.log(x) + (bb - 1.0) * np.log1p(-x)
                 - _sp.betaln(ab, bb))
    return ad.custom_elementwise(x, [
        (a_t, -ga / pdf),
        (b_t, -gb / pdf),
    ])


def reparam_inverse_gamma(shape_t: ad.Tensor, scale_t: ad.Tensor,
                          rng: np.random.Generator) -> ad.Tensor:
    a, s = shape_t.data, scale_t.data
    shape = np.broadcast_shapes(a.shape, s.shape)
    ab = np.broadcast_to(a, shape)
    sb = np.broadcast_to(s, shape)
    x = _clip_positive(1.0 / rng.gamma(ab, 1.0 / sb))
    u = sb / x
    # F(x) = Q(a, s/x) = 1 - P(a, s/x)
    dF_da = -gammainc_grad_shape(ab, u)
    log_pdf_x = ab * np.log(sb) - _sp.gammaln(ab) - (ab + 1.0) * np.log(x) - u
    pdf = np.exp(log_pdf_x)
    dF_ds = -np.exp((ab - 1.0) * np.log(u) - u - _sp.gammaln(ab)) / x
    return ad.custom_elementwise(x, [
        (shape_t, -dF_da / pdf),
        (scale_t, -dF_ds / pdf),
    ])


def reparam_inverse_gaussian(mean_t: ad.Tensor, shape_t: ad.Tensor,
                             rng: np.random.Generator) -> ad.Tensor:
    """Pathwise gradients via the closed-form CDF of the Wald distribution."""
    mu, lam = mean_t.data, shape_t.data
    shape = np.broadcast_shapes(mu.shape, lam.shape)
    mub = np.broadcast_to(mu, shape)
    lamb = np.broadcast_to(lam, shape)
    x = _clip_positive(rng.wald(mub, lamb))
    s = np.sqrt(lamb / x)
    t1 = s * (x / mub - 1.0)
    t2 = -s * (x / mub + 1.0)
    log_pdf_x = (0.5 * (np.log(lamb) - _LOG_2PI - 3.0 * np.log(x))
                 - lamb * (x - mub) ** 2 / (2.0 * mub ** 2 * x))
    pdf = np.exp(log_pdf_x)
    phi_t1 = np.exp(-0.5 * t1 ** 2) / np.sqrt(2.0 * np.pi)
    # E * Phi(t2) and E * phi(t2) with E = exp(2 lam / mu), computed in log
    # space: the exponents cancel to <= 0.
    e_cdf = np.exp(2.0 * lamb / mub + _sp.log_ndtr(t2))
    e_pdf = np.exp(2.0 * lamb / mub - 0.5 * t2 ** 2) / np.sqrt(2.0 * np.pi)
    dF_dmu = (phi_t1 * s * (-x / mub ** 2)
              - (2.0 * lamb / mub ** 2) * e_cdf
              + e_pdf * (s * x / mub ** 2))
    dF_dlam = (phi_t1 * t1 / (2.0 * lamb)
               + (2.0 / mub) * e_cdf
               + e_pdf * t2 / (2.0 * lamb))
    return ad.custom_elementwise(x, [
        (mean_t, -dF_dmu / pdf),
        (shape_t, -dF_dlam / pdf),
    ])


def reparam_laplace(loc_t: ad.Tensor, scale_t: ad.Tensor,
                    rng: np.random.Generator) -> ad.Tensor:
    """Inverse-CDF sampling; both parameter channels are exact."""
    loc, scale = loc_t.data, scale_t.data
    shape = np.broadcast_shapes(loc.shape, scale.shape)
    v = rng.uniform(-0.5, 0.5, size=shape)
    pull = -np.sign(v) * np.log1p(-2.0 * np.abs(v))
    value = loc + scale * pull
    return ad.custom_elementwise(value, [
        (loc_t, np.ones(shape)),
        (scale_t, pull),
    ])


_REPARAM = {
    "gaussian": reparam_gaussian,
    "gamma": reparam_gamma,
    "beta": reparam_beta,
    "inverse_gaussian": reparam_inverse_gaussian,
    "inverse_gamma": reparam_inverse_gamma,
}


def reparam_arr(family: str, p1_t: ad.Tensor, p2_t: ad.Tensor,
                rng: np.random.Generator) -> ad.Tensor:
    """Differentiable draw with parameter tensors already on a tape."""
    fn = _REPARAM.get(family)
    if fn is None:
        raise UnsupportedGradientError(
            f"no pathwise sampler for family '{family}'")
    return fn(p1_t, p2_t, rng)


@dataclass
class ReparamDraw:
    """A pathwise sample plus the parameter leaves it differentiates to."""

    sample: ad.Tensor
    p1: ad.Tensor
    p2: ad.Tensor


def reparam_sample(params: ExpFamParams, rng: np.random.Generator,
                   tape: ad.Tape, size=None) -> ReparamDraw:
    """Differentiable draw from `params` with parameter leaves on `tape`."""
    if tape is None:
        raise UnsupportedGradientError("reparam_sample needs a tape")
    fn = _REPARAM.get(params.family)
    if fn is None:
        raise UnsupportedGradientError(
            f"no pathwise sampler for family '{params.family}'")
    shape = () if size is None else (size,)
    p1 = tape.leaf(np.full(shape, params.p1))
    p2 = tape.leaf(np.full(shape, params.p2))
    return ReparamDraw(fn(p1, p2, rng), p1, p2)
