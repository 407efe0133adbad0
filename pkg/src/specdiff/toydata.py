"""Synthetic labeled audio: classes of decaying sinusoid bursts.

Each class owns a disjoint carrier-frequency band, so classes are separable
by spectral content alone, while per-clip draws (carrier, decay, burst count
and timing, phase) make every clip distinct. Generation is deterministic for
a given seed, and the on-disk layout is WAV files plus a tab-separated
manifest of (clip id, class label, filename).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidInputError
from .io import read_wav, write_wav
from .replication import LabeledClip
from .spectral import AudioClip

__all__ = [
    "ToyFoleySpec",
    "synth_clip",
    "generate_dataset",
    "write_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class ToyFoleySpec:
    num_classes: int = 7
    clips_per_class: int = 10
    clip_samples: int = 992
    sample_rate: int = 22050
    base_frequency: float = 600.0     # low edge of class 0's carrier band
    band_width: float = 500.0         # carrier range within a class
    band_spacing: float = 1200.0      # distance between class band edges
    decay_range: tuple = (60.0, 200.0)  # exponential decay rates, 1/s
    burst_counts: tuple = (1, 3)

    def __post_init__(self):
        if self.num_classes < 1 or self.clips_per_class < 1:
            raise InvalidInputError("need at least one class and one clip per class")
        if self.clip_samples < 64:
            raise InvalidInputError("clips shorter than 64 samples are not useful")
        top = self.carrier_band(self.num_classes - 1)[1]
        if top >= self.sample_rate / 2:
            raise InvalidInputError(
                f"highest carrier band reaches {top:.0f} Hz, above Nyquist"
            )

    def carrier_band(self, label: int):
        lo = self.base_frequency + label * self.band_spacing
        return lo, lo + self.band_width


def synth_clip(spec: ToyFoleySpec, label: int, rng) -> AudioClip:
    """One clip: a few exponentially decaying sine bursts in the class band."""
    if not 0 <= label < spec.num_classes:
        raise InvalidInputError(f"label {label} out of range")
    t = np.arange(spec.clip_samples) / spec.sample_rate
    lo, hi = spec.carrier_band(label)
    samples = np.zeros(spec.clip_samples)
    bursts = rng.integers(spec.burst_counts[0], spec.burst_counts[1] + 1)
    for _ in range(bursts):
        onset = rng.uniform(0.0, 0.6) * t[-1]
        carrier = rng.uniform(lo, hi)
        decay = rng.uniform(*spec.decay_range)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        tail = np.maximum(t - onset, 0.0)
        samples += amp * np.exp(-decay * tail) * np.sin(2 * np.pi * carrier * tail + phase) * (t >= onset)
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= 0.9 / max(peak, 0.9)
    return AudioClip(samples, spec.sample_rate)


def _clip_id(label: int, index: int) -> str:
    return f"class{label}_clip{index:03d}"


def generate_dataset(spec: ToyFoleySpec, seed: int):
    """All clips in memory as LabeledClip records, ordered by (class, index)."""
    items = []
    for label in range(spec.num_classes):
        for index in range(spec.clips_per_class):
            rng = np.random.default_rng((seed, label, index))
            items.append(LabeledClip(_clip_id(label, index), label, synth_clip(spec, label, rng)))
    return items


def write_dataset(spec: ToyFoleySpec, seed: int, out_dir) -> list:
    """Write WAVs and manifest.tsv; returns the manifest rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in generate_dataset(spec, seed):
        filename = f"{item.clip_id}.wav"
        write_wav(out / filename, item.clip, encoding="pcm16")
        rows.append((item.clip_id, item.label, filename))
    with open(out / "manifest.tsv", "w", encoding="utf-8") as fh:
        fh.write("clip_id\tlabel\tfile\n")
        for clip_id, label, filename in rows:
            fh.write(f"{clip_id}\t{label}\t{filename}\n")
    return rows


def load_dataset(data_dir):
    """Read a manifest-described dataset back as LabeledClip records."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.tsv"
    if not manifest.exists():
        raise FileFormatError(f"{manifest}: dataset manifest not found")
    items = []
    with open(manifest, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split("\t")
        if header != ["clip_id", "label", "file"]:
            raise FileFormatError(f"{manifest}: unexpected manifest header {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FileFormatError(f"{manifest}:{lineno}: expected three fields")
            clip_id, label, filename = parts
            try:
                label_int = int(label)
            except ValueError as exc:
                raise FileFormatError(f"{manifest}:{lineno}: bad label {label!r}") from exc
            items.append(LabeledClip(clip_id, label_int, read_wav(data_dir / filename)))
    if not items:
        raise FileFormatError(f"{manifest}: manifest lists no clips")
    return items
