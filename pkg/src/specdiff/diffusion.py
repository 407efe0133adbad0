"""Noise-scale parameterized diffusion core.

Houses the denoiser preconditioning scalings, the score relation, the
log-normal training noise distribution, and the weighted denoising
score-matching loss. The preconditioning keeps the raw network's input and
output at unit variance across noise levels, and the loss weight is the
exact inverse of the squared output scaling so every noise level starts
training at comparable loss magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericError

__all__ = [
    "Preconditioner",
    "NoiseLevelDistribution",
    "LossReport",
    "precondition_denoise",
    "score_from_denoiser",
    "sample_sigma",
    "dsm_loss",
]


def _broadcast_sigma(sigma, ndim):
    """Reshape a per-item sigma vector so it broadcasts over item axes."""
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 0:
        return sig
    if sig.ndim != 1:
        raise InvalidInputError(f"sigma must be scalar or 1-D, got shape {sig.shape}")
    return sig.reshape(sig.shape + (1,) * (ndim - 1))


@dataclass(frozen=True)
class Preconditioner:
    """Input/output/skip/noise scalings derived from the data standard deviation."""

    sigma_data: float = 0.2

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise InvalidInputError(f"sigma_data must be positive, got {self.sigma_data}")

    def c_skip(self, sigma):
        sd2 = self.sigma_data ** 2
        return sd2 / (sd2 + np.asarray(sigma, dtype=np.float64) ** 2)

    def c_out(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        sd2 = self.sigma_data ** 2
        return sigma * self.sigma_data / np.sqrt(sd2 + sigma ** 2)

    def c_in(self, sigma):
        sd2 = self.sigma_data ** 2
        return 1.0 / np.sqrt(sd2 + np.asarray(sigma, dtype=np.float64) ** 2)

    def c_noise(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise InvalidInputError("c_noise requires sigma > 0")
        return np.log(sigma) / 4.0

    def loss_weight(self, sigma):
        """Inverse of c_out**2; equalizes the initial loss across noise levels."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise InvalidInputError("loss_weight requires sigma > 0")
        sd2 = self.sigma_data ** 2
        return (sd2 + sigma ** 2) / (sigma ** 2 * sd2)


def precondition_denoise(net, x, sigma, cond=None, *, pre: Preconditioner):
    """Assemble the denoiser D(x; sigma) around a raw network.

    net is called as net(scaled_x, sigma, cond) and sees an input scaled to
    unit variance; its output is mixed back with a skip connection:
    D = c_skip*x + c_out*net(c_in*x, sigma, cond).
    """
    x = np.asarray(x, dtype=np.float64)
    sig = _broadcast_sigma(sigma, x.ndim)
    out = np.asarray(net(pre.c_in(sig) * x, sigma, cond), dtype=np.float64)
    if out.shape != x.shape:
        raise InvalidInputError(
            f"network output shape {out.shape} does not match input {x.shape}"
        )
    if not np.all(np.isfinite(out)):
        raise NumericError(f"network produced non-finite output at sigma={sigma!r}")
    return pre.c_skip(sig) * x + pre.c_out(sig) * out


def score_from_denoiser(x, sigma, denoised):
    """Score of the smoothed density: (D(x;sigma) - x) / sigma**2."""
    x = np.asarray(x, dtype=np.float64)
    sig = _broadcast_sigma(sigma, x.ndim)
    if np.any(np.asarray(sigma) <= 0):
        raise InvalidInputError("score is undefined at sigma <= 0")
    return (np.asarray(denoised, dtype=np.float64) - x) / sig ** 2


@dataclass(frozen=True)
class NoiseLevelDistribution:
    """Log-normal training noise levels: ln(sigma) ~ Normal(log_mean, log_std**2)."""

    log_mean: float = -3.0
    log_std: float = 1.0

    def __post_init__(self):
        if not self.log_std > 0:
            raise InvalidInputError(f"log_std must be positive, got {self.log_std}")

    def sample(self, rng, count):
        if count < 1:
            raise InvalidInputError(f"count must be >= 1, got {count}")
        return np.exp(self.log_mean + self.log_std * rng.standard_normal(count))


def sample_sigma(rng, count, dist: NoiseLevelDistribution | None = None):
    return (dist or NoiseLevelDistribution()).sample(rng, count)


@dataclass(frozen=True)
class LossReport:
    """Weighted per-item losses plus the noise levels that produced them."""

    total: float
    per_item: np.ndarray
    sigma_draws: np.ndarray

    @classmethod
    def from_items(cls, per_item, sigma_draws):
        per_item = np.asarray(per_item, dtype=np.float64)
        sigma_draws = np.asarray(sigma_draws, dtype=np.float64)
        if not np.all(np.isfinite(per_item)) or np.any(per_item < 0):
            bad = sigma_draws[~np.isfinite(per_item) | (per_item < 0)]
            raise NumericError(f"invalid per-item loss at sigma={bad!r}")
        return cls(float(per_item.mean()), per_item, sigma_draws)


def dsm_loss(model, batch, rng, *, pre: Preconditioner,
             noise_dist: NoiseLevelDistribution | None = None,
             labels=None) -> LossReport:
    """Denoising score-matching loss over a batch of clean states.

    Each item gets an independent noise level and noise draw; the per-item
    loss is loss_weight(sigma) times the mean squared error between
    model(x + sigma*eps, sigma) and x. model only needs an evaluate() method,
    so both analytic oracles and preconditioned networks fit.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim < 2 or batch.shape[0] < 1:
        raise InvalidInputError("batch must be (items, ...) with at least one item")
    n = batch.shape[0]
    sigmas = (noise_dist or NoiseLevelDistribution()).sample(rng, n)
    eps = rng.standard_normal(batch.shape)
    noisy = batch + _broadcast_sigma(sigmas, batch.ndim) * eps
    denoised = np.asarray(model.evaluate(noisy, sigmas, labels), dtype=np.float64)
    sq = (denoised - batch).reshape(n, -1) ** 2
    per_item = pre.loss_weight(sigmas) * sq.mean(axis=1)
    return LossReport.from_items(per_item, sigmas)
