"""Waveform <-> compressed complex spectrogram conversions.

The forward path is a centered STFT (reflect padding, Hann analysis window)
followed by a magnitude compression that raises |c| to a power alpha and
rescales by beta while leaving the phase untouched. The inverse path
decompresses and resynthesizes with a least-squares (normalized overlap-add)
synthesis window, so a round trip through the whole chain is exact up to
floating-point error. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import CalibrationError, InvalidInputError

__all__ = [
    "AudioClip",
    "StftConfig",
    "ComplexSpectrogram",
    "CompressionParams",
    "stft",
    "istft",
    "compress",
    "decompress",
    "calibrate_beta",
    "to_channels",
    "from_channels",
    "num_frames",
]

_WINDOW_KINDS = ("hann", "hamming", "blackman")


@dataclass(frozen=True)
class AudioClip:
    """A mono waveform with its sample rate. Samples are dimensionless,
    nominally within [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InvalidInputError("clip must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 510
    hop_size: int = 256
    fft_size: int = 510
    window_kind: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_size <= self.window_size <= self.fft_size):
            raise InvalidInputError(
                f"need 0 < hop ({self.hop_size}) <= window ({self.window_size})"
                f" <= fft ({self.fft_size})"
            )
        if self.fft_size % 2 != 0:
            raise InvalidInputError(f"fft_size must be even, got {self.fft_size}")
        if self.window_kind not in _WINDOW_KINDS:
            raise InvalidInputError(
                f"unknown window_kind {self.window_kind!r}, expected one of {_WINDOW_KINDS}"
            )

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1

    @property
    def pad(self):
        # centering pad applied to each end of the clip before framing
        return self.window_size // 2


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Frames x bins complex STFT values plus the config that produced them."""

    values: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise InvalidInputError("spectrogram values must be 2-D (frames x bins)")
        if values.shape[1] != self.config.num_bins:
            raise InvalidInputError(
                f"bin count {values.shape[1]} does not match fft_size//2+1 = {self.config.num_bins}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_frames(self):
        return self.values.shape[0]

    @property
    def num_bins(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class CompressionParams:
    """Magnitude compression |c| -> beta * |c|**alpha with phase preserved."""

    alpha: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.beta > 0.0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")


def _analysis_window(config: StftConfig) -> np.ndarray:
    # periodic (DFT-even) variant; the symmetric one puts zeros at both ends
    return get_window(config.window_kind, config.window_size, fftbins=True)


def num_frames(clip_len: int, config: StftConfig) -> int:
    padded = clip_len + 2 * config.pad
    return 1 + (padded - config.window_size) // config.hop_size


def stft(clip: AudioClip, config: StftConfig) -> ComplexSpectrogram:
    """Centered short-time Fourier transform of a clip.

    The clip is reflect-padded by window_size//2 on both ends, framed with
    the configured hop, windowed, and transformed with an FFT of fft_size
    (zero-padding the frame if fft_size > window_size). Only the
    non-negative-frequency half is kept: fft_size//2 + 1 bins.
    """
    x = clip.samples
    if x.size < config.window_size:
        raise InvalidInputError(
            f"clip length {x.size} is shorter than one window ({config.window_size})"
        )
    padded = np.pad(x, config.pad, mode="reflect")
    frames = num_frames(x.size, config)
    offsets = np.arange(frames) * config.hop_size
    segs = np.lib.stride_tricks.sliding_window_view(padded, config.window_size)[offsets]
    values = np.fft.rfft(segs * _analysis_window(config), n=config.fft_size, axis=1)
    return ComplexSpectrogram(values, config, clip.sample_rate)


def istft(spec: ComplexSpectrogram, config: StftConfig, trim_padding: bool = True) -> AudioClip:
    """Least-squares inverse STFT by normalized overlap-add.

    Each frame is inverse-transformed, re-windowed with the analysis window,
    and accumulated; the result is divided by the summed squared window. With
    trim_padding the centering pad is removed so the output lines up with the
    original clip (its length is the padded length minus 2*(window_size//2),
    which equals the original length when that was a hop multiple).
    """
    if config != spec.config:
        raise InvalidInputError(
            f"config mismatch: spectrogram was produced with {spec.config}, got {config}"
        )
    win = _analysis_window(config)
    frames = np.fft.irfft(spec.values, n=config.fft_size, axis=1)[:, : config.window_size]
    out_len = (spec.num_frames - 1) * config.hop_size + config.window_size
    num = np.zeros(out_len)
    den = np.zeros(out_len)
    for t in range(spec.num_frames):
        lo = t * config.hop_size
        num[lo : lo + config.window_size] += win * frames[t]
        den[lo : lo + config.window_size] += win * win
    out = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    if trim_padding:
        out = out[config.pad : out_len - config.pad]
        if out.size == 0:
            raise InvalidInputError("spectrogram too short to trim centering pad")
    return AudioClip(out, spec.sample_rate)


def _rescale_magnitudes(spec: ComplexSpectrogram, magnitude_map) -> ComplexSpectrogram:
    # multiply each value by new_mag/old_mag, keeping exact zeros at zero
    mag = np.abs(spec.values)
    safe = np.where(mag > 0.0, mag, 1.0)
    scale = np.where(mag > 0.0, magnitude_map(safe) / safe, 0.0)
    return ComplexSpectrogram(spec.values * scale, spec.config, spec.sample_rate)


def compress(spec: ComplexSpectrogram, params: CompressionParams) -> ComplexSpectrogram:
    """Map each value c to beta * |c|**alpha * exp(i*angle(c)); zeros stay zero."""
    return _rescale_magnitudes(spec, lambda m: params.beta * m ** params.alpha)


def decompress(spec: ComplexSpectrogram, params: CompressionParams) -> ComplexSpectrogram:
    """Exact inverse of :func:`compress`: |c| -> (|c|/beta)**(1/alpha)."""
    return _rescale_magnitudes(spec, lambda m: (m / params.beta) ** (1.0 / params.alpha))


def calibrate_beta(clips, config: StftConfig, alpha: float, target_quantile: float = 0.99) -> float:
    """Choose beta so the target quantile of beta * |c|**alpha over a dataset is 1.

    Uses the inverted-CDF quantile (a plain order statistic), which is exactly
    invariant under duplicating the dataset.
    """
    if not 0.0 < target_quantile <= 1.0:
        raise InvalidInputError(f"target_quantile must be in (0, 1], got {target_quantile}")
    mags = []
    for clip in clips:
        mags.append(np.abs(stft(clip, config).values).ravel() ** alpha)
    if not mags:
        raise InvalidInputError("calibrate_beta needs at least one clip")
    q = float(np.quantile(np.concatenate(mags), target_quantile, method="inverted_cdf"))
    if q <= 0.0:
        raise CalibrationError("dataset is silent at the target quantile; cannot calibrate beta")
    return 1.0 / q


def to_channels(spec: ComplexSpectrogram) -> np.ndarray:
    """Split a spectrogram into a real tensor of shape (2, frames, bins)."""
    return np.stack([spec.values.real, spec.values.imag])


def from_channels(tensor: np.ndarray, config: StftConfig, sample_rate: int) -> ComplexSpectrogram:
    """Rebuild a spectrogram from a (2, frames, bins) real/imaginary tensor."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[0] != 2:
        raise InvalidInputError(
            f"expected tensor of shape (2, frames, bins), got {tensor.shape}"
        )
    return ComplexSpectrogram(tensor[0] + 1j * tensor[1], config, sample_rate)
