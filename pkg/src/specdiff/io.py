"""File formats: WAV clips and binary spectrogram snapshots.

WAV support covers mono PCM 16-bit and IEEE 32-bit float; multi-channel
files are mixed down by averaging. Spectrogram snapshots are a little-endian
binary format: magic "EDMS", version, sample rate, dims, the STFT settings,
then the real channel followed by the imaginary channel as float32 rows.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.io import wavfile

from .errors import FileFormatError, InvalidInputError
from .spectral import AudioClip, ComplexSpectrogram, StftConfig

__all__ = [
    "read_wav",
    "write_wav",
    "write_spectrogram",
    "read_spectrogram",
]

SPECTROGRAM_MAGIC = b"EDMS"
SPECTROGRAM_VERSION = 1
_HEADER = "<4sIIIIIII16s"  # magic, version, rate, frames, bins, window, hop, fft, kind


def read_wav(path) -> AudioClip:
    """Load a WAV file as a mono float clip in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FileFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise FileFormatError(f"{path}: unsupported WAV sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise FileFormatError(f"{path}: WAV contains non-finite samples")
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip, encoding: str = "float32") -> None:
    """Write a clip as mono WAV, either IEEE float32 or PCM 16-bit."""
    if encoding == "float32":
        wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    elif encoding == "pcm16":
        scaled = np.clip(np.round(clip.samples * 32767.0), -32768, 32767)
        wavfile.write(path, clip.sample_rate, scaled.astype(np.int16))
    else:
        raise InvalidInputError(f"unknown WAV encoding {encoding!r}")


def write_spectrogram(path, spec: ComplexSpectrogram) -> None:
    cfg = spec.config
    header = struct.pack(
        _HEADER,
        SPECTROGRAM_MAGIC,
        SPECTROGRAM_VERSION,
        spec.sample_rate,
        spec.num_frames,
        spec.num_bins,
        cfg.window_size,
        cfg.hop_size,
        cfg.fft_size,
        cfg.window_kind.encode("ascii").ljust(16, b"\0"),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(spec.values.real.astype("<f4").tobytes())
        fh.write(spec.values.imag.astype("<f4").tobytes())


def read_spectrogram(path) -> ComplexSpectrogram:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize(_HEADER)
    if len(raw) < head_size:
        raise FileFormatError(f"{path}: truncated spectrogram header")
    magic, version, rate, frames, bins, window, hop, fft, kind = struct.unpack(
        _HEADER, raw[:head_size]
    )
    if magic != SPECTROGRAM_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != SPECTROGRAM_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    try:
        config = StftConfig(window, hop, fft, kind.rstrip(b"\0").decode("ascii"))
    except (InvalidInputError, UnicodeDecodeError) as exc:
        raise FileFormatError(f"{path}: invalid STFT settings in header ({exc})") from exc
    expected = head_size + 2 * 4 * frames * bins
    if len(raw) != expected:
        raise FileFormatError(
            f"{path}: payload size {len(raw)} does not match header dims (expected {expected})"
        )
    plane = frames * bins
    real = np.frombuffer(raw, dtype="<f4", count=plane, offset=head_size)
    imag = np.frombuffer(raw, dtype="<f4", count=plane, offset=head_size + 4 * plane)
    values = (real.astype(np.float64) + 1j * imag.astype(np.float64)).reshape(frames, bins)
    try:
        return ComplexSpectrogram(values, config, rate)
    except InvalidInputError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
