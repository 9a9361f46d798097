"""Epistemic (MC-dropout) and aleatoric (ADF) uncertainty for one range image.

Epistemic: n stochastic forward passes with dropout kept active (batch norm
stays in eval statistics), per-pixel value = sum over classes of the
population variance of the per-trial probabilities. Aleatoric: the input is
wrapped as a Gaussian with per-channel sensor noise and pushed through the
ADF rules; per-pixel value = sum over classes of the output variance. The
grid search picks the dropout rate minimizing a Gaussian negative
log-likelihood of the one-hot labels under the total uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adf import GaussianTensor
from .errors import ConfigError, DimensionError, InvalidDistributionError, InvalidTrialsError
from .model import Model

SIGMA_FLOOR = 1e-6
CHANNEL_ORDER = ("x", "y", "z", "intensity", "range")


@dataclass(frozen=True)
class SensorNoiseModel:
    """Per-channel input variances (x, y, z, intensity, range), unit squared."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=np.float64)
        if v.ndim != 1:
            raise InvalidDistributionError("variances must be a flat vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidDistributionError("variances must be finite and >= 0")
        object.__setattr__(self, "variances", v)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorNoiseModel":
        try:
            return cls(np.array([float(d[k]) for k in CHANNEL_ORDER]))
        except KeyError as exc:
            raise ConfigError(f"noise model missing channel {exc.args[0]!r}")
        except ValueError as exc:
            raise ConfigError(f"bad noise value: {exc}")

    @classmethod
    def isotropic(cls, variance: float, channels: int = 5) -> "SensorNoiseModel":
        return cls(np.full(channels, float(variance)))


@dataclass
class UncertaintyMap:
    mean_prediction: np.ndarray       # (C, h, w) probabilities
    epistemic: np.ndarray             # (h, w), >= 0
    aleatoric: np.ndarray             # (h, w), >= 0
    n_trials: int = 0

    def total(self) -> np.ndarray:
        return np.maximum(self.epistemic + self.aleatoric, SIGMA_FLOOR)


def _zeros_like_map(probs):
    return np.zeros(probs.shape[1:], dtype=np.float64)


def mc_dropout_infer(model: Model, x: np.ndarray, n: int, seed=0, rate=None) -> UncertaintyMap:
    """n dropout-active forward passes; epistemic variance of the softmax."""
    if n < 1:
        raise InvalidTrialsError("need at least one trial")
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected one (channels, h, w) image, got {x.shape}")
    seeds = np.random.SeedSequence(seed).spawn(n)
    trials = np.empty((n,) + (model.cfg.num_classes,) + x.shape[1:], dtype=np.float64)
    for i in range(n):
        trials[i] = model.forward(x, mode="mc", rng=np.random.default_rng(seeds[i]), rate=rate)
    mean = trials.mean(axis=0)
    epistemic = trials.var(axis=0).sum(axis=0)  # population variance, class-summed
    return UncertaintyMap(
        mean_prediction=mean, epistemic=epistemic, aleatoric=_zeros_like_map(mean), n_trials=n
    )


def adf_infer(model: Model, x: np.ndarray, noise: SensorNoiseModel, valid=None) -> UncertaintyMap:
    """Propagate sensor noise; aleatoric variance of the class probabilities."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected one (channels, h, w) image, got {x.shape}")
    if len(noise.variances) != x.shape[0]:
        raise DimensionError(f"noise model has {len(noise.variances)} channels, image {x.shape[0]}")
    var = np.broadcast_to(noise.variances[:, None, None], x.shape).copy()
    if valid is not None:
        var *= np.asarray(valid, dtype=np.float64)[None]  # empty pixels carry no noise
    out = model.adf(GaussianTensor(x[None], var[None]))
    return UncertaintyMap(
        mean_prediction=out.mean[0],
        epistemic=_zeros_like_map(out.mean[0]),
        aleatoric=out.variance[0].sum(axis=0),
        n_trials=0,
    )


def default_rate_grid(count: int = 20, low: float = 0.01, high: float = 0.5) -> np.ndarray:
    """Log-spaced dropout-rate candidates."""
    return np.geomspace(low, high, count)


def nll_objective(mean_prediction, sigma_tot, targets, valid) -> float:
    """Sum over valid pixels of 1/2 log(sigma) + ||onehot - pred||^2 / (2 sigma)."""
    c = mean_prediction.shape[0]
    onehot = np.eye(c)[np.asarray(targets)]            # (h, w, C)
    resid = ((onehot.transpose(2, 0, 1) - mean_prediction) ** 2).sum(axis=0)
    sigma = np.maximum(sigma_tot, SIGMA_FLOOR)
    per_pixel = 0.5 * np.log(sigma) + resid / (2.0 * sigma)
    return float(per_pixel[np.asarray(valid, dtype=bool)].sum())


def grid_search_dropout_rate(
    model: Model,
    calibration,
    rates,
    noise: SensorNoiseModel,
    n_trials: int = 30,
    seed: int = 0,
):
    """Pick the dropout rate minimizing the NLL objective on labeled data.

    calibration: iterable of (x, targets, valid) range-image triples. The
    model is never retrained; only inference-time dropout changes. Returns
    (best_rate, {rate: objective}); ties go to the smaller rate.
    """
    rates = [float(r) for r in rates]
    if not rates:
        raise ConfigError("need at least one candidate rate")
    if any(not 0.0 <= r < 1.0 for r in rates):
        raise ConfigError("candidate rates must lie in [0, 1)")
    calibration = list(calibration)
    if not calibration:
        raise ConfigError("need at least one calibration image")

    adf_parts = [adf_infer(model, x, noise, valid) for x, _, valid in calibration]
    objectives = {}
    for rate in sorted(rates):
        total = 0.0
        for (x, targets, valid), adf_part in zip(calibration, adf_parts):
            mc = mc_dropout_infer(model, x, n_trials, seed=seed, rate=rate)
            sigma = mc.epistemic + adf_part.aleatoric
            total += nll_objective(mc.mean_prediction, sigma, targets, valid)
        objectives[rate] = total
    best = min(objectives, key=lambda r: (objectives[r], r))
    return best, objectives
