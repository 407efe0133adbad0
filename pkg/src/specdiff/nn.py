"""Small neural-net toolkit: activation, parameter init, Adam, gradient checks.

Everything operates on plain dicts of float64 numpy arrays so that both the
denoiser network and the audit projection head share one optimizer and one
finite-difference harness.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidInputError

__all__ = ["gelu", "gelu_grad", "linear_init", "Adam", "finite_diff_check"]

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    # tanh form; smooth and cheap to differentiate in closed form
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x ** 2)


def linear_init(rng, fan_out, fan_in, scale=1.0):
    """Weight matrix of shape (fan_out, fan_in), N(0, scale/fan_in) entries."""
    return rng.standard_normal((fan_out, fan_in)) * math.sqrt(scale / fan_in)


class Adam:
    """Standard Adam over a dict of named parameter arrays (updates in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        if set(grads) != set(self._m):
            raise InvalidInputError("gradient keys do not match optimizer state")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def finite_diff_check(params, loss_and_grads, rng, num_probes=100, step=1e-5):
    """Compare analytic gradients against central finite differences.

    loss_and_grads(params) must return (scalar loss, dict of gradients) and be
    deterministic in params. Probes num_probes randomly chosen coordinates and
    returns (max relative error, worst "name[flat_index]" path, per-probe list).
    """
    _, grads = loss_and_grads(params)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    if sizes.sum() == 0:
        raise InvalidInputError("no parameters to probe")
    weights = sizes / sizes.sum()
    worst = (0.0, "")
    records = []
    for _ in range(num_probes):
        name = names[rng.choice(len(names), p=weights)]
        idx = int(rng.integers(params[name].size))
        flat = params[name].reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + step
        hi, _ = loss_and_grads(params)
        flat[idx] = keep - step
        lo, _ = loss_and_grads(params)
        flat[idx] = keep
        numeric = (hi - lo) / (2.0 * step)
        analytic = grads[name].reshape(-1)[idx]
        denom = max(abs(numeric) + abs(analytic), 1e-6)
        rel = abs(numeric - analytic) / denom
        records.append((f"{name}[{idx}]", rel))
        if rel > worst[0]:
            worst = (rel, f"{name}[{idx}]")
    return worst[0], worst[1], records
