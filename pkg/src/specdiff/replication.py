"""Content-replication audit between a generated set and a training set.

Clips are embedded to unit-norm vectors (a spectral baseline embedder, an
optional trainable projection head fine-tuned with a triplet margin loss on
augmented views, or vectors imported from a file). Each generated clip is
matched to its most cosine-similar training clip; the 95th percentile of
those top-1 scores, minus the training set's own leave-one-out 95th
percentile, is the relative similarity: positive values mean the generated
set resembles training data more than the training set resembles itself.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import FileFormatError, InvalidInputError, NumericError
from .spectral import AudioClip, StftConfig, stft

__all__ = [
    "AugmentationConfig",
    "LabeledClip",
    "Triplet",
    "augment",
    "make_triplet",
    "triplet_margin_loss",
    "EmbeddingModel",
    "BaselineSpectralEmbedding",
    "ProjectionHead",
    "ProjectedEmbedding",
    "ImportedEmbeddings",
    "finetune",
    "MatchResult",
    "SimilarityReport",
    "top1_match",
    "training_self_similarity_p95",
    "relative_similarity",
    "load_embedding_file",
    "write_embedding_file",
    "write_similarity_report",
    "write_histogram_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for the label-preserving perturbations, applied in the order
    circular shift -> gain -> additive noise at a target SNR."""

    shift_range: tuple = (-0.2, 0.2)     # fraction of clip length
    gain_range: tuple = (0.5, 2.0)       # multiplicative
    noise_snr_db: tuple = (10.0, 40.0)   # infinite SNR disables the noise

    def __post_init__(self):
        for name in ("shift_range", "gain_range", "noise_snr_db"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidInputError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.gain_range[0] <= 0:
            raise InvalidInputError("gains must be positive")

    @classmethod
    def identity(cls):
        return cls(shift_range=(0.0, 0.0), gain_range=(1.0, 1.0),
                   noise_snr_db=(np.inf, np.inf))


def augment(clip: AudioClip, config: AugmentationConfig, rng) -> AudioClip:
    """Randomly shift (circularly), rescale, and add white noise at a drawn SNR."""
    samples = clip.samples
    frac = rng.uniform(*config.shift_range)
    shift = int(round(frac * samples.size))
    if shift:
        samples = np.roll(samples, shift)
    gain = rng.uniform(*config.gain_range)
    samples = samples * gain
    snr_db = rng.uniform(*config.noise_snr_db)
    if np.isfinite(snr_db):
        power = float(np.mean(samples ** 2))
        noise_std = np.sqrt(power * 10.0 ** (-snr_db / 10.0))
        samples = samples + noise_std * rng.standard_normal(samples.size)
    return AudioClip(samples, clip.sample_rate)


@dataclass(frozen=True)
class LabeledClip:
    clip_id: str
    label: int
    clip: AudioClip


@dataclass(frozen=True)
class Triplet:
    anchor: LabeledClip
    positive: AudioClip
    negative_source: LabeledClip
    negative: AudioClip


def make_triplet(dataset, rng, config: AugmentationConfig) -> Triplet:
    """Anchor: a random clip from a class with >= 2 members (singleton classes
    are skipped with a warning). Positive: the anchor re-augmented. Negative:
    a different clip of the same class, augmented."""
    by_label = {}
    for item in dataset:
        by_label.setdefault(item.label, []).append(item)
    eligible = [item for items in by_label.values() if len(items) >= 2 for item in items]
    skipped = sorted(lbl for lbl, items in by_label.items() if len(items) < 2)
    if skipped:
        log.warning("skipping singleton classes %s when forming triplets", skipped)
    if not eligible:
        raise InvalidInputError("no class has two or more clips; cannot form triplets")
    anchor = eligible[rng.integers(len(eligible))]
    peers = [item for item in by_label[anchor.label] if item.clip_id != anchor.clip_id]
    negative_source = peers[rng.integers(len(peers))]
    return Triplet(
        anchor=anchor,
        positive=augment(anchor.clip, config, rng),
        negative_source=negative_source,
        negative=augment(negative_source.clip, config, rng),
    )


def triplet_margin_loss(anchor, positive, negative, margin: float = 0.2) -> float:
    """max(0, d(a,p) - d(a,n) + margin) with squared Euclidean distance, which
    on unit-norm vectors equals 2 - 2*cosine."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    d_ap = float(np.sum((a - p) ** 2))
    d_an = float(np.sum((a - n) ** 2))
    return max(0.0, d_ap - d_an + margin)


def _triplet_loss_grads(a, p, n, margin):
    d_ap = float(np.sum((a - p) ** 2))
    d_an = float(np.sum((a - n) ** 2))
    loss = d_ap - d_an + margin
    if loss <= 0.0:
        zero = np.zeros_like(a)
        return 0.0, zero, zero.copy(), zero.copy()
    return loss, 2.0 * (n - p), -2.0 * (a - p), 2.0 * (a - n)


class EmbeddingModel(ABC):
    """Maps clips to deterministic unit-norm vectors of fixed dimension."""

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def embed(self, clip: AudioClip) -> np.ndarray:
        ...

    def embed_named(self, clip_id: str, clip: AudioClip) -> np.ndarray:
        # hook for embedders that look vectors up by id instead of computing
        return self.embed(clip)


class BaselineSpectralEmbedding(EmbeddingModel):
    """Log band-energy fingerprint: band energies per frame, log-compressed,
    pooled to per-band temporal mean and standard deviation, whitened with
    statistics fitted on the training set, then unit-normalized.

    Temporal pooling makes the vector length-invariant above one window and
    insensitive to frame reordering, which is what lets rearranged copies of
    a training clip still match their source.
    """

    def __init__(self, bands: int = 32,
                 stft_config: StftConfig = StftConfig(256, 128, 256)):
        if bands < 1 or bands > stft_config.num_bins:
            raise InvalidInputError(f"bands must be in [1, {stft_config.num_bins}]")
        self.bands = bands
        self.stft_config = stft_config
        self._mean = None
        self._std = None

    @property
    def dim(self) -> int:
        return 2 * self.bands

    def _features(self, clip: AudioClip) -> np.ndarray:
        power = np.abs(stft(clip, self.stft_config).values) ** 2
        band_energy = np.stack(
            [chunk.sum(axis=1) for chunk in np.array_split(power, self.bands, axis=1)],
            axis=1,
        )
        logs = np.log(band_energy + 1e-10)
        return np.concatenate([logs.mean(axis=0), logs.std(axis=0)])

    def fit(self, clips) -> "BaselineSpectralEmbedding":
        feats = np.stack([self._features(c) for c in clips])
        if feats.shape[0] < 1:
            raise InvalidInputError("need at least one clip to fit whitening statistics")
        self._mean = feats.mean(axis=0)
        self._std = np.maximum(feats.std(axis=0), 1e-8)
        return self

    def embed(self, clip: AudioClip) -> np.ndarray:
        if self._mean is None:
            raise InvalidInputError("embedder is unfitted; call fit() on the training set")
        white = (self._features(clip) - self._mean) / self._std
        norm = np.linalg.norm(white)
        if norm < 1e-12:
            raise NumericError("degenerate embedding (zero vector after whitening)")
        return white / norm


class ProjectionHead:
    """Two-layer perceptron with unit-normalized output, trained on top of a
    frozen embedder. Gradients are explicit for the finite-difference checks."""

    def __init__(self, in_dim: int, hidden_dim: int = 64, out_dim: int = 32, rng=None):
        if rng is None:
            raise InvalidInputError("ProjectionHead needs an rng for initialization")
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.params = {
            "w1": nn.linear_init(rng, hidden_dim, in_dim),
            "b1": np.zeros(hidden_dim),
            "w2": nn.linear_init(rng, out_dim, hidden_dim),
            "b2": np.zeros(out_dim),
        }

    def forward(self, emb):
        emb = np.asarray(emb, dtype=np.float64)
        squeeze = emb.ndim == 1
        e = emb[None] if squeeze else emb
        p = self.params
        a1 = e @ p["w1"].T + p["b1"]
        h = nn.gelu(a1)
        z = h @ p["w2"].T + p["b2"]
        norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        y = z / norm
        cache = {"e": e, "a1": a1, "h": h, "z": z, "norm": norm, "y": y, "squeeze": squeeze}
        return (y[0] if squeeze else y), cache

    def backward(self, cache, grad_out):
        gy = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"]:
            gy = gy[None]
        y, norm = cache["y"], cache["norm"]
        gz = (gy - y * np.sum(y * gy, axis=1, keepdims=True)) / norm
        grads = {"w2": gz.T @ cache["h"], "b2": gz.sum(axis=0)}
        gh = gz @ self.params["w2"]
        ga1 = gh * nn.gelu_grad(cache["a1"])
        grads["w1"] = ga1.T @ cache["e"]
        grads["b1"] = ga1.sum(axis=0)
        return grads


class ProjectedEmbedding(EmbeddingModel):
    """Frozen base embedder composed with a projection head."""

    def __init__(self, base: EmbeddingModel, head: ProjectionHead):
        if head.in_dim != base.dim:
            raise InvalidInputError("head input dim does not match base embedder")
        self.base = base
        self.head = head

    @property
    def dim(self) -> int:
        return self.head.out_dim

    def embed(self, clip: AudioClip) -> np.ndarray:
        out, _ = self.head.forward(self.base.embed(clip))
        return out

    def embed_named(self, clip_id: str, clip: AudioClip) -> np.ndarray:
        out, _ = self.head.forward(self.base.embed_named(clip_id, clip))
        return out


class ImportedEmbeddings(EmbeddingModel):
    """Externally computed vectors keyed by clip id (normalized on load)."""

    def __init__(self, vectors: dict):
        if not vectors:
            raise InvalidInputError("imported embedding table is empty")
        dims = {v.size for v in vectors.values()}
        if len(dims) != 1:
            raise InvalidInputError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self._dim = dims.pop()
        self._vectors = {}
        for key, vec in vectors.items():
            norm = np.linalg.norm(vec)
            if norm < 1e-12:
                raise InvalidInputError(f"zero embedding vector for id {key!r}")
            self._vectors[key] = np.asarray(vec, dtype=np.float64) / norm

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, clip: AudioClip) -> np.ndarray:
        raise InvalidInputError("imported embeddings are keyed by id; use embed_named")

    def embed_named(self, clip_id: str, clip: AudioClip) -> np.ndarray:
        if clip_id not in self._vectors:
            raise InvalidInputError(f"no imported embedding for clip id {clip_id!r}")
        return self._vectors[clip_id]


def finetune(head: ProjectionHead, embedder: EmbeddingModel, dataset, epochs: int,
             config: AugmentationConfig, rng, *, margin: float = 0.2,
             batch_size: int = 8, learning_rate: float = 1e-3):
    """Train the head with the triplet margin loss over augmented triplets.

    The base embedder is never updated. One epoch draws len(dataset) triplets.
    Returns the mean loss per optimizer step (empty for zero epochs, in which
    case the head is untouched).
    """
    if epochs < 0:
        raise InvalidInputError(f"epochs must be >= 0, got {epochs}")
    if epochs == 0:
        return []
    anchors = {item.clip_id: embedder.embed_named(item.clip_id, item.clip) for item in dataset}
    optimizer = nn.Adam(head.params, lr=learning_rate)
    losses = []
    steps = max(1, (epochs * len(dataset)) // batch_size)
    for _ in range(steps):
        grads = {k: np.zeros_like(v) for k, v in head.params.items()}
        batch_loss = 0.0
        for _ in range(batch_size):
            trip = make_triplet(dataset, rng, config)
            embs = np.stack([
                anchors[trip.anchor.clip_id],
                embedder.embed(trip.positive),
                embedder.embed(trip.negative),
            ])
            (a, p, n), cache = head.forward(embs)
            loss, ga, gp, gn = _triplet_loss_grads(a, p, n, margin)
            batch_loss += loss
            if loss > 0.0:
                part = head.backward(cache, np.stack([ga, gp, gn]) / batch_size)
                for key in grads:
                    grads[key] += part[key]
        if not np.isfinite(batch_loss):
            raise NumericError("triplet loss diverged during fine-tuning")
        optimizer.step(head.params, grads)
        losses.append(batch_loss / batch_size)
    return losses


@dataclass(frozen=True)
class MatchResult:
    generated_id: str
    match_id: str
    score: float


@dataclass(frozen=True)
class SimilarityReport:
    matches: tuple
    generated_p95: float
    training_p95: float

    @property
    def relative(self) -> float:
        return self.generated_p95 - self.training_p95


def _embed_set(items: dict, embedder: EmbeddingModel):
    ids = sorted(items)
    if not ids:
        raise InvalidInputError("empty clip set")
    matrix = np.stack([embedder.embed_named(cid, items[cid]) for cid in ids])
    return ids, matrix


def top1_match(generated: dict, training: dict, embedder: EmbeddingModel):
    """Best training match per generated clip by cosine similarity.

    Ties resolve to the smallest training id (ids are compared as strings).
    """
    gen_ids, gen_mat = _embed_set(generated, embedder)
    train_ids, train_mat = _embed_set(training, embedder)
    sims = gen_mat @ train_mat.T
    best = np.argmax(sims, axis=1)  # first occurrence wins; train_ids are sorted
    return [
        MatchResult(gid, train_ids[best[i]], float(sims[i, best[i]]))
        for i, gid in enumerate(gen_ids)
    ]


def training_self_similarity_p95(training: dict, embedder: EmbeddingModel) -> float:
    """95th percentile (linear interpolation) of leave-one-out top-1 cosine
    similarities within the training set."""
    ids, mat = _embed_set(training, embedder)
    if len(ids) < 2:
        raise InvalidInputError("need at least two training clips for self-similarity")
    sims = mat @ mat.T
    np.fill_diagonal(sims, -np.inf)
    return float(np.percentile(sims.max(axis=1), 95.0))


def relative_similarity(generated: dict, training: dict,
                        embedder: EmbeddingModel) -> SimilarityReport:
    matches = top1_match(generated, training, embedder)
    generated_p95 = float(np.percentile([m.score for m in matches], 95.0))
    training_p95 = training_self_similarity_p95(training, embedder)
    return SimilarityReport(tuple(matches), generated_p95, training_p95)


def load_embedding_file(path) -> dict:
    """Parse "id<TAB>v1,v2,...,vd" lines into an id -> vector dict."""
    vectors = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FileFormatError(f"{path}:{lineno}: expected 'id<TAB>v1,v2,...'")
            try:
                vec = np.array([float(v) for v in parts[1].split(",")])
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: bad vector component ({exc})") from exc
            if parts[0] in vectors:
                raise FileFormatError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            vectors[parts[0]] = vec
    if not vectors:
        raise FileFormatError(f"{path}: no embedding records found")
    return vectors


def write_embedding_file(path, vectors: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(vectors):
            row = ",".join(f"{v:.9g}" for v in np.asarray(vectors[key]).ravel())
            fh.write(f"{key}\t{row}\n")


def write_similarity_report(path, report: SimilarityReport) -> None:
    """Per-clip matches plus a summary block, as stable plain text."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# per-clip top-1 matches\n")
        fh.write("generated_id\tmatch_id\tscore\n")
        for m in report.matches:
            fh.write(f"{m.generated_id}\t{m.match_id}\t{m.score:.6f}\n")
        fh.write("# summary\n")
        fh.write(f"generated_p95\t{report.generated_p95:.6f}\n")
        fh.write(f"training_p95\t{report.training_p95:.6f}\n")
        fh.write(f"relative\t{report.relative:.6f}\n")


def write_histogram_csv(path, report: SimilarityReport, training: dict,
                        embedder: EmbeddingModel, bins: int = 40) -> None:
    """Histogram of generated top-1 scores next to training leave-one-out
    scores over shared [-1, 1] bins."""
    ids, mat = _embed_set(training, embedder)
    sims = mat @ mat.T
    np.fill_diagonal(sims, -np.inf)
    training_scores = sims.max(axis=1)
    generated_scores = np.array([m.score for m in report.matches])
    edges = np.linspace(-1.0, 1.0, bins + 1)
    gen_counts, _ = np.histogram(generated_scores, bins=edges)
    train_counts, _ = np.histogram(training_scores, bins=edges)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,generated_count,training_count\n")
        for i in range(bins):
            fh.write(f"{edges[i]:.6f},{edges[i + 1]:.6f},{gen_counts[i]},{train_counts[i]}\n")
