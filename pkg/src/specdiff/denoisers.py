"""Denoiser implementations: analytic oracles and a small trainable network.

The oracles return the exact posterior mean E[x0 | x0 + sigma*eps = x] for
Gaussian and Gaussian-mixture data and serve as ground truth throughout the
test and benchmark suites. The trainable path is a fully-connected residual
network with explicit reverse-mode gradients (no autograd framework), wrapped
in the standard preconditioning so it can be trained with the weighted
denoising score-matching loss and sampled from directly.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import LossReport, NoiseLevelDistribution, Preconditioner, precondition_denoise
from .errors import FileFormatError, InvalidInputError, NumericError
from .spectral import CompressionParams, StftConfig

__all__ = [
    "Denoiser",
    "GaussianOracleDenoiser",
    "MixtureOracleDenoiser",
    "MlpConfig",
    "MlpDenoiser",
    "PreconditionedDenoiser",
    "train_step",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]


class Denoiser(ABC):
    """Contract: evaluate(x, sigma, cond) returns E[clean | noisy x at sigma].

    Implementations must be pure (same arguments give identical results) and
    accept sigma as a scalar or, for batched x, a vector matching axis 0.
    cond is a class index, an int vector, or None for the null class.
    """

    @abstractmethod
    def evaluate(self, x, sigma, cond=None):
        ...


def _sigma_col(sigma, ndim):
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 0:
        return sig
    return sig.reshape(sig.shape + (1,) * (ndim - 1))


class GaussianOracleDenoiser(Denoiser):
    """Exact denoiser for data ~ Normal(mean, scale**2) elementwise."""

    def __init__(self, mean=0.0, scale=1.0):
        if not scale > 0:
            raise InvalidInputError(f"scale must be positive, got {scale}")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = float(scale)

    def evaluate(self, x, sigma, cond=None):
        x = np.asarray(x, dtype=np.float64)
        sig = _sigma_col(sigma, x.ndim)
        s2 = self.scale ** 2
        return (s2 * x + sig ** 2 * self.mean) / (s2 + sig ** 2)


class MixtureOracleDenoiser(Denoiser):
    """Exact denoiser for an isotropic Gaussian-mixture data distribution.

    Components live on the trailing axes of x (the state); leading axes are
    treated as independent batch items. Responsibilities are computed in
    log space to stay stable when components are far apart.
    """

    def __init__(self, weights, means, scales):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        if self.means.ndim < 2:
            self.means = np.atleast_2d(self.means)
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.scales.shape != (k,):
            raise InvalidInputError("weights, means, scales must agree on component count")
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise InvalidInputError("weights must be positive and sum to 1")
        if np.any(self.scales <= 0):
            raise InvalidInputError("scales must be positive")

    @property
    def state_shape(self):
        return self.means.shape[1:]

    def evaluate(self, x, sigma, cond=None):
        x = np.asarray(x, dtype=np.float64)
        state_ndim = self.means.ndim - 1
        dim = int(np.prod(self.means.shape[1:]))
        lead = x.shape[: x.ndim - state_ndim]
        flat = x.reshape(lead + (1, dim))                       # (..., 1, dim)
        mu = self.means.reshape(-1, dim)                        # (K, dim)
        sig = np.asarray(sigma, dtype=np.float64)
        if sig.ndim:
            sig = sig.reshape(sig.shape + (1,) * (len(lead) - sig.ndim))
            sig2_k = (sig ** 2)[..., None]                      # (..., 1) over K axis
            sig2_kd = (sig ** 2)[..., None, None]               # (..., 1, 1) over K, dim
        else:
            sig2_k = sig2_kd = sig ** 2
        var = self.scales ** 2 + sig2_k                         # (..., K)
        log_resp = (
            np.log(self.weights)
            - 0.5 * np.sum((flat - mu) ** 2, axis=-1) / var
            - 0.5 * dim * np.log(2.0 * np.pi * var)
        )
        log_resp -= log_resp.max(axis=-1, keepdims=True)
        resp = np.exp(log_resp)
        resp /= resp.sum(axis=-1, keepdims=True)                # (..., K)
        post = (self.scales[:, None] ** 2 * flat + sig2_kd * mu) / var[..., None]
        return np.sum(resp[..., None] * post, axis=-2).reshape(x.shape)


@dataclass(frozen=True)
class MlpConfig:
    """Architecture hyperparameters for the trainable denoiser."""

    input_dim: int
    hidden_dim: int = 256
    hidden_layers: int = 4
    noise_frequencies: int = 16
    num_classes: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.hidden_layers < 1:
            raise InvalidInputError("network dimensions must be positive")
        if self.noise_frequencies < 1 or self.num_classes < 0:
            raise InvalidInputError("invalid noise_frequencies or num_classes")

    @property
    def param_names(self):
        names = ["w_in", "b_in", "w_noise", "class_emb"]
        for i in range(self.hidden_layers - 1):
            names += [f"w_h{i}", f"b_h{i}"]
        return names + ["w_out", "b_out"]


class MlpDenoiser:
    """Residual fully-connected network over flattened states.

    The first hidden layer receives the input projection plus a sinusoidal
    embedding of the noise conditioner ln(sigma)/4 and a learned class
    embedding (one table row per class plus a reserved null row). The output
    layer starts at zero so the preconditioned denoiser begins as the pure
    skip path. forward() returns a cache that backward() consumes to produce
    exact reverse-mode parameter gradients.
    """

    def __init__(self, config: MlpConfig, rng=None, params=None):
        self.config = config
        self.frequencies = np.geomspace(1.0, 64.0, config.noise_frequencies)
        if params is not None:
            self.params = params
            self._validate_params()
        else:
            if rng is None:
                raise InvalidInputError("need an rng or explicit params to build the network")
            self.params = self._init_params(rng)

    def _init_params(self, rng):
        cfg = self.config
        h, d = cfg.hidden_dim, cfg.input_dim
        params = {
            "w_in": nn.linear_init(rng, h, d),
            "b_in": np.zeros(h),
            "w_noise": nn.linear_init(rng, h, 2 * cfg.noise_frequencies),
            "class_emb": rng.standard_normal((cfg.num_classes + 1, h)) * 0.1,
            "w_out": np.zeros((d, h)),
            "b_out": np.zeros(d),
        }
        for i in range(cfg.hidden_layers - 1):
            params[f"w_h{i}"] = nn.linear_init(rng, h, h)
            params[f"b_h{i}"] = np.zeros(h)
        return params

    def _validate_params(self):
        missing = set(self.config.param_names) ^ set(self.params)
        if missing:
            raise InvalidInputError(f"parameter set mismatch: {sorted(missing)}")

    def _noise_features(self, cnoise):
        arg = np.multiply.outer(cnoise, self.frequencies)
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)

    def _cond_index(self, cond, n):
        null = self.config.num_classes
        if cond is None:
            return np.full(n, null, dtype=np.intp)
        idx = np.asarray(cond, dtype=np.intp)
        if idx.ndim == 0:
            idx = np.full(n, int(idx), dtype=np.intp)
        if idx.shape != (n,):
            raise InvalidInputError(f"cond shape {idx.shape} does not match batch size {n}")
        if np.any((idx < -1) | (idx >= null)) and null > 0:
            raise InvalidInputError(f"class index out of range [0, {null}) (or -1 for null)")
        if null == 0 and np.any(idx != -1):
            raise InvalidInputError("network was built without classes; cond must be None or -1")
        return np.where(idx < 0, null, idx)

    def forward(self, x, sigma, cond=None):
        """Run the network on (n, input_dim) inputs; returns (output, cache)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise InvalidInputError(f"expected (n, {self.config.input_dim}) input, got {x.shape}")
        n = x.shape[0]
        sig = np.asarray(sigma, dtype=np.float64)
        if np.any(sig <= 0):
            raise InvalidInputError("sigma must be positive")
        cnoise = np.log(np.broadcast_to(sig, (n,)).astype(np.float64)) / 4.0
        feats = self._noise_features(cnoise)
        idx = self._cond_index(cond, n)
        p = self.params
        a0 = x @ p["w_in"].T + p["b_in"] + feats @ p["w_noise"].T + p["class_emb"][idx]
        h = nn.gelu(a0)
        cache = {"x": x, "feats": feats, "idx": idx, "a0": a0, "blocks": []}
        for i in range(self.config.hidden_layers - 1):
            a = h @ p[f"w_h{i}"].T + p[f"b_h{i}"]
            cache["blocks"].append((h, a))
            h = h + nn.gelu(a)
        out = h @ p["w_out"].T + p["b_out"]
        cache["h_last"] = h
        cache["squeeze"] = squeeze
        return (out[0] if squeeze else out), cache

    def backward(self, cache, output_gradient):
        """Parameter gradients for the forward pass recorded in cache."""
        gout = np.asarray(output_gradient, dtype=np.float64)
        if cache["squeeze"]:
            gout = gout[None]
        if gout.shape != (cache["x"].shape[0], self.config.input_dim):
            raise InvalidInputError(
                f"output_gradient shape {gout.shape} does not match forward pass"
            )
        p = self.params
        grads = {
            "w_out": gout.T @ cache["h_last"],
            "b_out": gout.sum(axis=0),
        }
        gh = gout @ p["w_out"]
        for i in reversed(range(self.config.hidden_layers - 1)):
            h_prev, a = cache["blocks"][i]
            ga = gh * nn.gelu_grad(a)
            grads[f"w_h{i}"] = ga.T @ h_prev
            grads[f"b_h{i}"] = ga.sum(axis=0)
            gh = gh + ga @ p[f"w_h{i}"]
        ga0 = gh * nn.gelu_grad(cache["a0"])
        grads["w_in"] = ga0.T @ cache["x"]
        grads["b_in"] = ga0.sum(axis=0)
        grads["w_noise"] = ga0.T @ cache["feats"]
        gemb = np.zeros_like(p["class_emb"])
        np.add.at(gemb, cache["idx"], ga0)
        grads["class_emb"] = gemb
        return grads


class PreconditionedDenoiser(Denoiser):
    """Trainable network wrapped in the preconditioning scalings.

    Accepts states shaped state_shape or (batch, *state_shape); flattens them
    for the network and restores the shape afterwards.
    """

    def __init__(self, net: MlpDenoiser, pre: Preconditioner, state_shape):
        self.net = net
        self.pre = pre
        self.state_shape = tuple(state_shape)
        if int(np.prod(self.state_shape)) != net.config.input_dim:
            raise InvalidInputError(
                f"state shape {state_shape} does not flatten to input_dim "
                f"{net.config.input_dim}"
            )

    def evaluate(self, x, sigma, cond=None):
        x = np.asarray(x, dtype=np.float64)
        lead = x.ndim - len(self.state_shape)
        if x.shape[lead:] != self.state_shape or lead not in (0, 1):
            raise InvalidInputError(
                f"expected state shape {self.state_shape} with at most one batch axis,"
                f" got {x.shape}"
            )
        flat = x.reshape(-1, self.net.config.input_dim)
        n = flat.shape[0]

        def run_net(scaled, s, c):
            sig = np.broadcast_to(np.asarray(s, dtype=np.float64), (n,))
            out, _ = self.net.forward(scaled, sig, c)
            return out

        denoised = precondition_denoise(run_net, flat, sigma, cond, pre=self.pre)
        return denoised.reshape(x.shape)


def train_step(model: PreconditionedDenoiser, batch, labels, optimizer, *,
               noise_dist: NoiseLevelDistribution | None = None,
               drop_prob: float = 0.1, rng) -> LossReport:
    """One optimizer update of the weighted denoising loss.

    Each item draws its own noise level and noise; with probability drop_prob
    its label is replaced by the null class so the network also learns the
    unconditional distribution needed for guided sampling.
    """
    net, pre = model.net, model.pre
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, net.config.input_dim)
    n = batch.shape[0]
    if n < 1:
        raise InvalidInputError("empty training batch")
    if labels is None:
        cond = None
    else:
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape != (n,):
            raise InvalidInputError(f"labels shape {labels.shape} != batch size {n}")
        cond = labels.copy()
        if drop_prob > 0:
            cond[rng.random(n) < drop_prob] = -1
    sigmas = (noise_dist or NoiseLevelDistribution()).sample(rng, n)
    eps = rng.standard_normal(batch.shape)
    noisy = batch + sigmas[:, None] * eps
    c_in = pre.c_in(sigmas)[:, None]
    c_out = pre.c_out(sigmas)[:, None]
    c_skip = pre.c_skip(sigmas)[:, None]
    out, cache = net.forward(c_in * noisy, sigmas, cond)
    denoised = c_skip * noisy + c_out * out
    diff = denoised - batch
    weight = pre.loss_weight(sigmas)
    per_item = weight * (diff ** 2).mean(axis=1)
    report = LossReport.from_items(per_item, sigmas)
    # d total / d out; total = mean_i weight_i * mean_j diff_ij^2
    gout = (2.0 / (n * batch.shape[1])) * weight[:, None] * c_out * diff
    grads = net.backward(cache, gout)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}; aborting update")
    optimizer.step(net.params, grads)
    return report


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to regenerate audio: network, scalings, and transforms."""

    net_config: MlpConfig
    params: dict
    state_frames: int
    state_bins: int
    preconditioner: Preconditioner
    compression: CompressionParams
    stft_config: StftConfig
    sample_rate: int

    @property
    def state_shape(self):
        return (2, self.state_frames, self.state_bins)

    def build(self) -> PreconditionedDenoiser:
        net = MlpDenoiser(self.net_config, params={k: v.copy() for k, v in self.params.items()})
        return PreconditionedDenoiser(net, self.preconditioner, self.state_shape)


CHECKPOINT_MAGIC = b"EDMC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = "<4sI" + "IIIIII" + "ddd" + "IIII16s" + "Q"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = ckpt.net_config.param_names
    flat = np.concatenate([np.asarray(ckpt.params[n], dtype=np.float64).ravel() for n in names])
    header = struct.pack(
        _CKPT_HEADER,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        ckpt.state_frames,
        ckpt.state_bins,
        ckpt.net_config.hidden_dim,
        ckpt.net_config.hidden_layers,
        ckpt.net_config.noise_frequencies,
        ckpt.net_config.num_classes,
        ckpt.preconditioner.sigma_data,
        ckpt.compression.alpha,
        ckpt.compression.beta,
        ckpt.sample_rate,
        ckpt.stft_config.window_size,
        ckpt.stft_config.hop_size,
        ckpt.stft_config.fft_size,
        ckpt.stft_config.window_kind.encode("ascii").ljust(16, b"\0"),
        flat.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize(_CKPT_HEADER)
    if len(raw) < head_size:
        raise FileFormatError(f"{path}: truncated checkpoint header")
    (magic, version, frames, bins, hidden, layers, freqs, classes,
     sigma_data, alpha, beta, rate, window, hop, fft, kind, count) = struct.unpack(
        _CKPT_HEADER, raw[:head_size]
    )
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    try:
        net_config = MlpConfig(2 * frames * bins, hidden, layers, freqs, classes)
        pre = Preconditioner(sigma_data)
        comp = CompressionParams(alpha, beta)
        stft_cfg = StftConfig(window, hop, fft, kind.rstrip(b"\0").decode("ascii"))
    except (InvalidInputError, UnicodeDecodeError) as exc:
        raise FileFormatError(f"{path}: invalid header fields ({exc})") from exc
    if len(raw) != head_size + 4 * count:
        raise FileFormatError(f"{path}: payload does not match declared parameter count")
    flat = np.frombuffer(raw, dtype="<f4", offset=head_size).astype(np.float64)
    params = {}
    cursor = 0
    probe = MlpDenoiser(net_config, rng=np.random.default_rng(0))
    for name in net_config.param_names:
        shape = probe.params[name].shape
        size = int(np.prod(shape))
        if cursor + size > flat.size:
            raise FileFormatError(f"{path}: parameter stream ended inside {name}")
        params[name] = flat[cursor : cursor + size].reshape(shape).copy()
        cursor += size
    if cursor != flat.size:
        raise FileFormatError(f"{path}: trailing bytes after parameters")
    return Checkpoint(net_config, params, frames, bins, pre, comp, stft_cfg, rate)
