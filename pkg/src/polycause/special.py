"""Shape-parameter derivatives of regularized incomplete gamma/beta integrals.

Pathwise gradients of Gamma/Beta/InverseGamma samples need d/da of
P(a, x) (regularized lower incomplete gamma) and d/da, d/db of I_x(a, b)
(regularized incomplete beta).  Neither ships with scipy, so both are
computed here in closed form by differentiating the classic evaluation
schemes themselves:

* P(a, x): the power series for x <= a + 1, term-by-term differentiated
  (each term picks up a `log x - digamma` factor); the Lentz continued
  fraction for Q(a, x) otherwise, with an exact derivative channel carried
  through every Lentz update.
* I_x(a, b): the standard continued fraction with two derivative channels
  (the fraction's coefficients are rational in a and b), plus the analytic
  derivative of the `x^a (1-x)^b / B(a, b)` prefactor.

Everything is vectorized over flat float64 arrays and iterates to float64
convergence (relative 1e-15, generous iteration caps).
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = ["gammainc_grad_shape", "betainc_grads"]

_EPS = 1e-15
_MAXITER = 600
_FPMIN = 1e-300


def _gser_grad(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d/da of P(a, x) via the differentiated power series (x <= a+1)."""
    term = np.ones_like(a)
    dterm = np.zeros_like(a)
    s = np.ones_like(a)
    ds = np.zeros_like(a)
    n = np.zeros_like(a)
    for _ in range(_MAXITER):
        n += 1.0
        denom = a + n
        ratio = x / denom
        dterm = dterm * ratio - term * x / (denom * denom)
        term = term * ratio
        s += term
        ds += dterm
        if np.all(np.abs(term) < _EPS * np.abs(s)):
            break
    logx = np.log(np.where(x > 0.0, x, 1.0))
    front = np.exp(a * logx - x - _sp.gammaln(a + 1.0))
    dfront = front * (logx - _sp.digamma(a + 1.0))
    out = dfront * s + front * ds
    return np.where(x > 0.0, out, 0.0)


def _gcf_grad(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d/da of P(a, x) via the differentiated continued fraction (x > a+1)."""
    b = x + 1.0 - a
    db = -np.ones_like(a)
    c = np.full_like(a, 1.0 / _FPMIN)
    dc = np.zeros_like(a)
    d = 1.0 / b
    dd = -db / (b * b)
    h = d.copy()
    dh = dd.copy()
    for i in range(1, _MAXITER + 1):
        an = -i * (i - a)
        dan = np.full_like(a, float(i))
        b = b + 2.0
        # D <- 1 / (an * D + b)
        pre = an * d + b
        dpre = dan * d + an * dd + db
        pre = np.where(np.abs(pre) < _FPMIN, _FPMIN, pre)
        d = 1.0 / pre
        dd = -dpre * d * d
        # C <- b + an / C   (dC form avoids squaring the huge first C)
        cnew = b + an / c
        dcnew = db + (dan - an * dc / c) / c
        cnew = np.where(np.abs(cnew) < _FPMIN, _FPMIN, cnew)
        c, dc = cnew, dcnew
        delta = d * c
        ddelta = dd * c + d * dc
        dh = dh * delta + h * ddelta
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _EPS):
            break
    front = np.exp(a * np.log(x) - x - _sp.gammaln(a))
    dfront = front * (np.log(x) - _sp.digamma(a))
    dq = dfront * h + front * dh
    return -dq


def gammainc_grad_shape(a, x) -> np.ndarray:
    """d/da of the regularized lower incomplete gamma P(a, x).

    Valid for a > 0, x >= 0; vectorized; accuracy ~1e-12 absolute on the
    a in [0.1, 5] box (tested against high-precision differentiation).
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    a, x = np.broadcast_arrays(a, x)
    out = np.zeros(a.shape, dtype=np.float64)
    af, xf, of = a.reshape(-1), x.reshape(-1), out.reshape(-1)
    ser = xf <= af + 1.0
    if np.any(ser):
        of[ser] = _gser_grad(af[ser].copy(), xf[ser].copy())
    cf = ~ser
    if np.any(cf):
        of[cf] = _gcf_grad(af[cf].copy(), xf[cf].copy())
    return out


def _betacf_grads(a, b, x):
    """Continued fraction of the incomplete beta plus d/da, d/db channels."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(a)
    dca = np.zeros_like(a)
    dcb = np.zeros_like(a)

    def _recip(v, dva, dvb):
        v = np.where(np.abs(v) < _FPMIN, _FPMIN, v)
        inv = 1.0 / v
        return inv, -dva * inv * inv, -dvb * inv * inv

    d0 = 1.0 - qab * x / qap
    d0a = -x * (1.0 - b) / (qap * qap)
    d0b = -x / qap
    d, dda, ddb = _recip(d0, d0a, d0b)
    h = d.copy()
    dha = dda.copy()
    dhb = ddb.copy()
    for m in range(1, _MAXITER + 1):
        m2 = 2.0 * m
        # even-step coefficient
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        daa_a = -aa * (1.0 / (qam + m2) + 1.0 / (a + m2))
        daa_b = m * x / ((qam + m2) * (a + m2))
        v = 1.0 + aa * d
        dva = daa_a * d + aa * dda
        dvb = daa_b * d + aa * ddb
        d, dda, ddb = _recip(v, dva, dvb)
        cv = 1.0 + aa / c
        dcva = (daa_a * c - aa * dca) / (c * c)
        dcvb = (daa_b * c - aa * dcb) / (c * c)
        cv = np.where(np.abs(cv) < _FPMIN, _FPMIN, cv)
        c, dca, dcb = cv, dcva, dcvb
        delta = d * c
        dha = dha * delta + h * (dda * c + d * dca)
        dhb = dhb * delta + h * (ddb * c + d * dcb)
        h = h * delta
        # odd-step coefficient
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        daa_a = aa * (1.0 / (a + m) + 1.0 / (qab + m)
                      - 1.0 / (a + m2) - 1.0 / (qap + m2))
        daa_b = aa / (qab + m)
        v = 1.0 + aa * d
        dva = daa_a * d + aa * dda
        dvb = daa_b * d + aa * ddb
        d, dda, ddb = _recip(v, dva, dvb)
        cv = 1.0 + aa / c
        dcva = (daa_a * c - aa * dca) / (c * c)
        dcvb = (daa_b * c - aa * dcb) / (c * c)
        cv = np.where(np.abs(cv) < _FPMIN, _FPMIN, cv)
        c, dca, dcb = cv, dcva, dcvb
        delta = d * c
        ddelta_a = dda * c + d * dca
        ddelta_b = ddb * c + d * dcb
        dha = dha * delta + h * ddelta_a
        dhb = dhb * delta + h * ddelta_b
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _EPS):
            break
    return h, dha, dhb


def _betainc_grads_flat(a, b, x):
    front = np.exp(_sp.gammaln(a + b) - _sp.gammaln(a) - _sp.gammaln(b)
                   + a * np.log(x) + b * np.log1p(-x))
    dfront_a = front * (_sp.digamma(a + b) - _sp.digamma(a) + np.log(x))
    dfront_b = front * (_sp.digamma(a + b) - _sp.digamma(b) + np.log1p(-x))
    use_direct = x < (a + 1.0) / (a + b + 2.0)
    ga = np.zeros_like(a)
    gb = np.zeros_like(a)
    if np.any(use_direct):
        sel = use_direct
        h, dha, dhb = _betacf_grads(a[sel], b[sel], x[sel])
        fa, fb = dfront_a[sel], dfront_b[sel]
        fr, av = front[sel], a[sel]
        # I = front * h / a
        ga[sel] = (fa * h + fr * dha) / av - fr * h / (av * av)
        gb[sel] = (fb * h + fr * dhb) / av
    if np.any(~use_direct):
        sel = ~use_direct
        # I = 1 - front * cf(b, a, 1-x) / b ; cf channels come back in
        # (first-arg, second-arg) order, i.e. (d/db, d/da)
        h, dh_b, dh_a = _betacf_grads(b[sel], a[sel], 1.0 - x[sel])
        fa, fb = dfront_a[sel], dfront_b[sel]
        fr, bv = front[sel], b[sel]
        ga[sel] = -(fa * h + fr * dh_a) / bv
        gb[sel] = -((fb * h + fr * dh_b) / bv - fr * h / (bv * bv))
    return ga, gb


def betainc_grads(a, b, x):
    """(d/da, d/db) of the regularized incomplete beta I_x(a, b).

    Valid for a, b > 0 and x in (0, 1); endpoints return 0 (the integral
    is constant there).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    a, b, x = np.broadcast_arrays(a, b, x)
    ga = np.zeros(a.shape, dtype=np.float64)
    gb = np.zeros(a.shape, dtype=np.float64)
    af = a.reshape(-1).copy()
    bf = b.reshape(-1).copy()
    xf = x.reshape(-1).copy()
    interior = (xf > 0.0) & (xf < 1.0)
    if np.any(interior):
        gaf, gbf = _betainc_grads_flat(af[interior], bf[interior], xf[interior])
        ga.reshape(-1)[interior] = gaf
        gb.reshape(-1)[interior] = gbf
    return ga, gb
