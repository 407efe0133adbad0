"""Deterministic probability-flow sampling.

The reverse process is the ODE dx/dsigma = (x - D(x; sigma)) / sigma solved
over a warped noise-level grid from sigma_max down to 0. Besides Euler and
Heun in sigma, there are exponential-integrator solvers in the log noise
scale lambda = -ln(sigma): writing the update as
x_next = (s_next/s_cur) * (x + integral of e^lambda D along the step), the
integral is exact for constant D, and singlestep/multistep variants estimate
the lambda-derivatives of D from midpoint evaluations or step history. The
final step to sigma = 0 is always a single Euler step (the right-hand side
is singular there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoisers import Denoiser, load_checkpoint
from .errors import InvalidInputError
from .spectral import AudioClip, decompress, from_channels, istft

__all__ = [
    "SOLVERS",
    "SigmaSchedule",
    "SamplerConfig",
    "TrajectoryRecord",
    "karras_schedule",
    "ode_rhs",
    "euler_step",
    "heun_step",
    "dpm_singlestep",
    "dpm_multistep",
    "apply_cfg",
    "dynamic_threshold",
    "expected_nfe",
    "sample",
    "generate",
]

SOLVERS = ("euler", "heun", "dpm-2s", "dpm-3s", "dpm-2m", "dpm-3m")


@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels with a terminal zero appended."""

    steps: int
    sigma_min: float
    sigma_max: float
    rho: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.steps + 1,) or values[-1] != 0.0:
            raise InvalidInputError("schedule must hold steps values plus a terminal zero")
        if np.any(np.diff(values) >= 0):
            raise InvalidInputError("schedule values must be strictly decreasing")
        object.__setattr__(self, "values", values)


def karras_schedule(steps: int, sigma_min: float = 1e-4, sigma_max: float = 3.0,
                    rho: float = 7.0) -> SigmaSchedule:
    """Noise grid sigma_i = (smax^(1/rho) + i/(N-1) * (smin^(1/rho) - smax^(1/rho)))^rho.

    Endpoints are pinned exactly to sigma_max and sigma_min; rho = 1 collapses
    to arithmetic spacing. steps = 1 yields just [sigma_max, 0].
    """
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")
    if not 0 < sigma_min < sigma_max:
        raise InvalidInputError(
            f"need 0 < sigma_min ({sigma_min}) < sigma_max ({sigma_max})"
        )
    if steps == 1:
        values = np.array([sigma_max, 0.0])
    else:
        ramp = np.arange(steps) / (steps - 1)
        inv = sigma_max ** (1.0 / rho) + ramp * (sigma_min ** (1.0 / rho) - sigma_max ** (1.0 / rho))
        values = inv ** rho
        values[0] = sigma_max
        values[-1] = sigma_min
        values = np.append(values, 0.0)
    return SigmaSchedule(steps, sigma_min, sigma_max, rho, values)


@dataclass(frozen=True)
class SamplerConfig:
    solver: str = "dpm-3s"
    steps: int = 50
    cfg_scale: float = 1.0
    threshold_quantile: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise InvalidInputError(f"unknown solver {self.solver!r}; pick one of {SOLVERS}")
        if self.steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise InvalidInputError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.threshold_quantile is not None and not 0 < self.threshold_quantile <= 1:
            raise InvalidInputError(
                f"threshold_quantile must be in (0, 1], got {self.threshold_quantile}"
            )


@dataclass
class TrajectoryRecord:
    """Bookkeeping for one sampling run: per-step sigma targets and NFE."""

    sigmas: list = field(default_factory=list)
    states: list | None = None
    nfe: int = 0


def expected_nfe(solver: str, steps: int, cfg_scale: float = 1.0) -> int:
    """Denoiser evaluations a sampling run will spend (doubled under guidance)."""
    regular = steps - 1  # intervals before the terminal Euler step
    per_eval = 2 if cfg_scale != 1.0 else 1
    if solver == "euler":
        count = regular + 1
    elif solver in ("heun", "dpm-2s"):
        count = 2 * regular + 1
    elif solver == "dpm-3s":
        count = 3 * regular + 1
    elif solver in ("dpm-2m", "dpm-3m"):
        count = regular + 1
    else:
        raise InvalidInputError(f"unknown solver {solver!r}")
    return per_eval * count


def ode_rhs(x, sigma, model: Denoiser, cond=None):
    """dx/dsigma of the probability-flow ODE: (x - D(x; sigma)) / sigma."""
    if sigma <= 0:
        raise InvalidInputError("ode_rhs is singular at sigma <= 0")
    return (x - model.evaluate(x, sigma, cond)) / sigma


def euler_step(x, sigma_cur, sigma_next, model: Denoiser, cond=None):
    if not sigma_cur > sigma_next:
        raise InvalidInputError("euler_step requires sigma_cur > sigma_next")
    return x + (sigma_next - sigma_cur) * ode_rhs(x, sigma_cur, model, cond)


def heun_step(x, sigma_cur, sigma_next, model: Denoiser, cond=None):
    """Trapezoidal correction of the Euler predictor; plain Euler when
    stepping to zero."""
    d_cur = ode_rhs(x, sigma_cur, model, cond)
    x_pred = x + (sigma_next - sigma_cur) * d_cur
    if sigma_next == 0.0:
        return x_pred
    d_next = (x_pred - model.evaluate(x_pred, sigma_next, cond)) / sigma_next
    return x + (sigma_next - sigma_cur) * 0.5 * (d_cur + d_next)


def _ei_weights(h):
    # integral of e^tau * tau^k / k! over [0, h], for k = 0, 1, 2
    eh = math.exp(h)
    return eh - 1.0, eh * (h - 1.0) + 1.0, 0.5 * (eh * (h * h - 2.0 * h + 2.0) - 2.0)


def dpm_singlestep(x, sigma_cur, sigma_next, model: Denoiser, cond=None, order: int = 2):
    """Exponential-integrator step with intermediate evaluations at equally
    spaced points in lambda = -ln(sigma). Exact when D is constant; order k
    costs k evaluations."""
    if not sigma_cur > sigma_next > 0:
        raise InvalidInputError("dpm_singlestep requires sigma_cur > sigma_next > 0")
    if order not in (2, 3):
        raise InvalidInputError(f"singlestep order must be 2 or 3, got {order}")
    lam_cur = -math.log(sigma_cur)
    h = -math.log(sigma_next) - lam_cur
    d0 = model.evaluate(x, sigma_cur, cond)
    if order == 2:
        s_mid = math.exp(-(lam_cur + 0.5 * h))
        x_mid = (s_mid / sigma_cur) * x + (1.0 - s_mid / sigma_cur) * d0
        d_mid = model.evaluate(x_mid, s_mid, cond)
        i0, i1, _ = _ei_weights(h)
        d1 = (d_mid - d0) / (0.5 * h)
        return (sigma_next / sigma_cur) * (x + i0 * d0 + i1 * d1)
    third = h / 3.0
    s_a = math.exp(-(lam_cur + third))
    x_a = (s_a / sigma_cur) * x + (1.0 - s_a / sigma_cur) * d0
    d_a = model.evaluate(x_a, s_a, cond)
    i0a, i1a, _ = _ei_weights(2.0 * third)
    s_b = math.exp(-(lam_cur + 2.0 * third))
    x_b = (s_b / sigma_cur) * (x + i0a * d0 + i1a * (d_a - d0) / third)
    d_b = model.evaluate(x_b, s_b, cond)
    # derivative estimates at lam_cur from the three equally spaced evaluations
    d1 = (-3.0 * d0 + 4.0 * d_a - d_b) / (2.0 * third)
    d2 = (d0 - 2.0 * d_a + d_b) / third ** 2
    i0, i1, i2 = _ei_weights(h)
    return (sigma_next / sigma_cur) * (x + i0 * d0 + i1 * d1 + i2 * d2)


def dpm_multistep(history, x, sigma_next, order: int = 2):
    """Exponential-integrator step reusing stored (sigma, D) evaluations.

    history holds (sigma, denoised) pairs, most recent last; the last entry
    must be the evaluation at the current state. Effective order ramps up
    with available history: the first step runs order 1, the second order 2.
    """
    if order not in (2, 3):
        raise InvalidInputError(f"multistep order must be 2 or 3, got {order}")
    if not history:
        raise InvalidInputError("dpm_multistep needs at least the current evaluation")
    if sigma_next <= 0:
        raise InvalidInputError("terminal step is handled by the driver, not dpm_multistep")
    sigma_cur, d0 = history[-1]
    lam_cur = -math.log(sigma_cur)
    h = -math.log(sigma_next) - lam_cur
    i0, i1, i2 = _ei_weights(h)
    effective = min(order, len(history))
    if effective == 1:
        return (sigma_next / sigma_cur) * (x + i0 * d0)
    sigma_p1, d_p1 = history[-2]
    delta1 = lam_cur - (-math.log(sigma_p1))
    if effective == 2:
        # first-weight form: absorb the slope correction into the constant term
        d_bar = d0 + (h / (2.0 * delta1)) * (d0 - d_p1)
        return (sigma_next / sigma_cur) * (x + i0 * d_bar)
    sigma_p2, d_p2 = history[-3]
    delta2 = (-math.log(sigma_p1)) - (-math.log(sigma_p2))
    dd1 = (d0 - d_p1) / delta1
    dd1_prev = (d_p1 - d_p2) / delta2
    dd2 = (dd1 - dd1_prev) / (delta1 + delta2)
    return (sigma_next / sigma_cur) * (x + i0 * d0 + i1 * (dd1 + delta1 * dd2) + i2 * (2.0 * dd2))


def apply_cfg(d_cond, d_uncond, weight):
    """Guided denoiser output: d_uncond + weight * (d_cond - d_uncond)."""
    if weight < 0:
        raise InvalidInputError(f"guidance weight must be >= 0, got {weight}")
    d_cond = np.asarray(d_cond, dtype=np.float64)
    d_uncond = np.asarray(d_uncond, dtype=np.float64)
    if d_cond.shape != d_uncond.shape:
        raise InvalidInputError("guided and unguided outputs must have the same shape")
    return d_uncond + weight * (d_cond - d_uncond)


def dynamic_threshold(x, quantile, batch_axis=None):
    """Quantile-clamp-and-rescale a tensor into [-1, 1].

    s is the given quantile of |x| (floored at 1); values are clipped to
    [-s, s] and divided by s. With batch_axis set, each slice along that axis
    gets its own s. Idempotent: a second application changes nothing.
    """
    if not 0 < quantile <= 1:
        raise InvalidInputError(f"quantile must be in (0, 1], got {quantile}")
    x = np.asarray(x, dtype=np.float64)
    if batch_axis is None:
        s = max(float(np.quantile(np.abs(x), quantile)), 1.0)
        return np.clip(x, -s, s) / s
    mags = np.moveaxis(np.abs(x), batch_axis, 0).reshape(x.shape[batch_axis], -1)
    s = np.maximum(np.quantile(mags, quantile, axis=1), 1.0)
    shape = [1] * x.ndim
    shape[batch_axis] = x.shape[batch_axis]
    s = s.reshape(shape)
    return np.clip(x, -s, s) / s


class _GuidedModel(Denoiser):
    """Wraps a denoiser with guidance, optional thresholding, and NFE counting.

    At weight 1 the conditional output is returned untouched (single call),
    so guided and plain conditional sampling are bit-identical.
    """

    def __init__(self, model, weight, threshold_quantile, record, batch_axis=None):
        self.model = model
        self.weight = weight
        self.threshold_quantile = threshold_quantile
        self.record = record
        self.batch_axis = batch_axis

    def evaluate(self, x, sigma, cond=None):
        if self.weight == 1.0:
            denoised = self.model.evaluate(x, sigma, cond)
            self.record.nfe += 1
        else:
            d_cond = self.model.evaluate(x, sigma, cond)
            d_uncond = self.model.evaluate(x, sigma, None)
            self.record.nfe += 2
            denoised = apply_cfg(d_cond, d_uncond, self.weight)
        if self.threshold_quantile is not None:
            denoised = dynamic_threshold(denoised, self.threshold_quantile, self.batch_axis)
        return denoised


def sample(model: Denoiser, schedule: SigmaSchedule, config: SamplerConfig, cond=None,
           rng=None, shape=None, batched=False, record_states=False):
    """Draw x0 ~ Normal(0, sigma_max**2) and integrate the flow to sigma = 0.

    Guidance blends conditional and null-class outputs at every evaluation
    (two model calls per evaluation when cfg_scale != 1); when a threshold
    quantile is configured, each blended denoiser output is rescaled into
    [-1, 1] before the solver consumes it. With batched=True, axis 0 of shape
    indexes independent states (thresholding is then per state). Returns
    (final state, TrajectoryRecord). Deterministic given the rng state.
    """
    if shape is None:
        shape = getattr(model, "state_shape", None)
        if shape is None:
            raise InvalidInputError("model exposes no state_shape; pass shape explicitly")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    record = TrajectoryRecord(states=[] if record_states else None)
    guided = _GuidedModel(model, config.cfg_scale, config.threshold_quantile, record,
                          batch_axis=0 if batched else None)
    x = rng.standard_normal(shape) * schedule.sigma_max
    values = schedule.values
    history = []
    multistep = config.solver in ("dpm-2m", "dpm-3m")
    for i in range(len(values) - 1):
        s_cur, s_next = float(values[i]), float(values[i + 1])
        if multistep:
            history.append((s_cur, guided.evaluate(x, s_cur, cond)))
            if s_next == 0.0:
                x = history[-1][1]  # Euler step to zero lands on the denoised output
            else:
                order = 2 if config.solver == "dpm-2m" else 3
                x = dpm_multistep(history, x, s_next, order)
                del history[:-2]
        elif s_next == 0.0:
            x = euler_step(x, s_cur, s_next, guided, cond)
        elif config.solver == "euler":
            x = euler_step(x, s_cur, s_next, guided, cond)
        elif config.solver == "heun":
            x = heun_step(x, s_cur, s_next, guided, cond)
        elif config.solver == "dpm-2s":
            x = dpm_singlestep(x, s_cur, s_next, guided, cond, order=2)
        else:
            x = dpm_singlestep(x, s_cur, s_next, guided, cond, order=3)
        record.sigmas.append(s_next)
        if record_states:
            record.states.append(x.copy())
    return x, record


def generate(checkpoint, config: SamplerConfig, cond=None, rng=None,
             schedule: SigmaSchedule | None = None):
    """Sample a compressed-spectrogram state from a checkpointed model and
    invert it back to a waveform (decompress, then inverse STFT).

    checkpoint may be a loaded Checkpoint or a path. Returns (AudioClip,
    TrajectoryRecord).
    """
    if isinstance(checkpoint, (str, bytes)) or hasattr(checkpoint, "__fspath__"):
        checkpoint = load_checkpoint(checkpoint)
    if cond is not None and not 0 <= int(cond) < checkpoint.net_config.num_classes:
        raise InvalidInputError(
            f"class {cond} out of range for a {checkpoint.net_config.num_classes}-class model"
        )
    if checkpoint.state_bins != checkpoint.stft_config.num_bins:
        raise InvalidInputError(
            "checkpoint state bins do not span the STFT bins; cannot invert to audio"
        )
    model = checkpoint.build()
    if schedule is None:
        schedule = karras_schedule(config.steps)
    state, record = sample(model, schedule, config, cond=cond, rng=rng)
    spec = from_channels(state, checkpoint.stft_config, checkpoint.sample_rate)
    clip = istft(decompress(spec, checkpoint.compression), checkpoint.stft_config)
    return clip, record
