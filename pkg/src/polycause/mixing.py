"""Invertible nonlinear mixing from latents to observations.

The map is a stack of square linear layers with leaky-ReLU between them
(none after the last). Every layer matrix must be well conditioned, and the
leaky slope sits strictly inside (0, 1), so the whole map is bijective with
a closed-form inverse. Observation noise is NOT applied here; the scale
sigma_eps just rides along so datasets stay self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

COND_LIMIT = 100.0


@dataclass(frozen=True)
class MixingFunction:
    weights: tuple
    biases: tuple
    slope: float
    sigma_eps: float

    def __post_init__(self):
        if not self.weights:
            raise ValidationError("mixing needs at least one layer")
        if not 0.0 < self.slope < 1.0:
            raise ValidationError(f"leaky slope must lie in (0, 1), got {self.slope}")
        if self.sigma_eps < 0.0:
            raise ValidationError("sigma_eps must be nonnegative")
        ell = np.shape(self.weights[0])[0]
        ws, bs = [], []
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (ell, ell) or b.shape != (ell,):
                raise ValidationError(f"layer {li} is not square of width {ell}")
            cond = float(np.linalg.cond(w))
            if not cond < COND_LIMIT:
                raise ValidationError(
                    f"layer {li} condition number {cond:.1f} exceeds {COND_LIMIT}")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        if len(bs) != len(self.weights):
            raise ValidationError("one bias vector per layer required")
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        object.__setattr__(self, "slope", float(self.slope))
        object.__setattr__(self, "sigma_eps", float(self.sigma_eps))

    @property
    def ell(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layers(self) -> int:
        return len(self.weights)


def make_mixing(rng: np.random.Generator, ell: int, layers: int = 3,
                sigma_eps: float = 0.01, slope: float = 0.2,
                max_tries: int = 100) -> MixingFunction:
    """Sample a mixing function, resampling badly conditioned layers."""
    if layers < 1:
        raise ValidationError(f"layers must be >= 1, got {layers}")
    weights = []
    biases = []
    for _ in range(layers):
        for attempt in range(max_tries + 1):
            w = rng.normal(0.0, 1.0, size=(ell, ell)) / np.sqrt(ell)
            if np.linalg.cond(w) < COND_LIMIT:
                break
            if attempt == max_tries:
                raise RuntimeError(
                    f"no well-conditioned {ell}x{ell} layer in {max_tries} tries")
        weights.append(w)
        biases.append(rng.uniform(-0.5, 0.5, size=ell))
    return MixingFunction(weights=tuple(weights), biases=tuple(biases),
                          slope=slope, sigma_eps=sigma_eps)


def mixing_forward(mix: MixingFunction, z) -> np.ndarray:
    """Apply the mixing to a vector or an (N, ell) batch (noiseless)."""
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    a = z[None, :] if squeeze else z
    if a.shape[1] != mix.ell:
        raise ValidationError(f"expected width {mix.ell}, got {a.shape[1]}")
    last = mix.layers - 1
    for li, (w, b) in enumerate(zip(mix.weights, mix.biases)):
        a = a @ w.T + b
        if li < last:
            a = np.where(a >= 0.0, a, mix.slope * a)
    return a[0] if squeeze else a


def mixing_inverse(mix: MixingFunction, x) -> np.ndarray:
    """Exact inverse of mixing_forward."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.shape[1] != mix.ell:
        raise ValidationError(f"expected width {mix.ell}, got {a.shape[1]}")
    last = mix.layers - 1
    for li in range(last, -1, -1):
        a = np.linalg.solve(mix.weights[li], (a - mix.biases[li]).T).T
        if li > 0:
            a = np.where(a >= 0.0, a, a / mix.slope)
    return a[0] if squeeze else a


def mixing_to_dict(mix: MixingFunction) -> dict:
    return {"weights": [w.tolist() for w in mix.weights],
            "biases": [b.tolist() for b in mix.biases],
            "slope": mix.slope, "sigma_eps": mix.sigma_eps}


def mixing_from_dict(doc: dict) -> MixingFunction:
    for key in ("weights", "biases", "slope", "sigma_eps"):
        if key not in doc:
            raise ValidationError(f"mixing document is missing field '{key}'")
    return MixingFunction(
        weights=tuple(np.array(w, dtype=np.float64) for w in doc["weights"]),
        biases=tuple(np.array(b, dtype=np.float64) for b in doc["biases"]),
        slope=float(doc["slope"]), sigma_eps=float(doc["sigma_eps"]))
