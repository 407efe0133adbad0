"""Solver benchmark: endpoint error versus step count on analytic tasks.

Two built-in tasks with known or high-accuracy references:

* gaussian -- zero-mean unit-scale Gaussian data. The flow is linear and the
  endpoint has the closed form x0 * smin_scale / sqrt(1 + sigma_max**2)
  evaluated at sigma = 0, so errors are measured against an exact answer.
* mixture -- a two-component Gaussian mixture, nonlinear enough to separate
  solver orders cleanly; the reference is a 10,000-step Heun run.

Errors are relative Frobenius norms over a batch of trajectories sharing one
initial-noise draw per seed, so repeated runs are bit-reproducible.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .denoisers import GaussianOracleDenoiser, MixtureOracleDenoiser
from .errors import InvalidInputError
from .sampling import SOLVERS, SamplerConfig, expected_nfe, karras_schedule, sample

__all__ = [
    "BenchResult",
    "ORACLE_NAMES",
    "make_oracle",
    "reference_endpoint",
    "run_benchmark",
    "fit_order_slopes",
    "write_benchmark_csv",
]

ORACLE_NAMES = ("gaussian", "mixture")

_BATCH = 16
_DIM = 4
_SIGMA_MIN = 1e-4
_SIGMA_MAX = 3.0
_RHO = 7.0
_MIXTURE_SCALE = 0.55
_MIXTURE_SEP = 1.0
_REFERENCE_STEPS = 10_000


@dataclass(frozen=True)
class BenchResult:
    solver: str
    steps: int
    nfe: int
    endpoint_error: float
    wall_time_ms: float


def make_oracle(name: str):
    if name == "gaussian":
        return GaussianOracleDenoiser(mean=0.0, scale=1.0)
    if name == "mixture":
        means = np.stack([np.full(_DIM, _MIXTURE_SEP), np.full(_DIM, -_MIXTURE_SEP)])
        return MixtureOracleDenoiser([0.5, 0.5], means, [_MIXTURE_SCALE, _MIXTURE_SCALE])
    raise InvalidInputError(f"unknown oracle {name!r}; pick one of {ORACLE_NAMES}")


def _config(solver: str, steps: int, seed: int) -> SamplerConfig:
    # no guidance, no thresholding: the task is raw solver accuracy
    return SamplerConfig(solver=solver, steps=steps, cfg_scale=1.0,
                         threshold_quantile=None, seed=seed)


def _run(oracle, solver, steps, seed):
    schedule = karras_schedule(steps, _SIGMA_MIN, _SIGMA_MAX, _RHO)
    rng = np.random.default_rng(seed)
    state, record = sample(oracle, schedule, _config(solver, steps, seed), cond=None,
                           rng=rng, shape=(_BATCH, _DIM), batched=True)
    return state, record


def reference_endpoint(name: str, seed: int):
    """Exact (gaussian) or 10,000-step Heun (mixture) endpoint for a seed's
    shared initial draw."""
    if name == "gaussian":
        x0 = np.random.default_rng(seed).standard_normal((_BATCH, _DIM)) * _SIGMA_MAX
        return x0 / np.sqrt(1.0 + _SIGMA_MAX ** 2)
    oracle = make_oracle(name)
    state, _ = _run(oracle, "heun", _REFERENCE_STEPS, seed)
    return state


def run_benchmark(oracle_name: str, solvers=SOLVERS, steps_list=(8, 16, 32, 64),
                  seed: int = 0):
    """Benchmark each (solver, steps) pair; returns a list of BenchResult."""
    oracle = make_oracle(oracle_name)
    reference = reference_endpoint(oracle_name, seed)
    ref_norm = float(np.linalg.norm(reference))
    results = []
    for solver in solvers:
        if solver not in SOLVERS:
            raise InvalidInputError(f"unknown solver {solver!r}")
        for steps in steps_list:
            start = time.perf_counter()
            state, record = _run(oracle, solver, steps, seed)
            elapsed_ms = (time.perf_counter() - start) * 1e3
            err = float(np.linalg.norm(state - reference)) / ref_norm
            assert record.nfe == expected_nfe(solver, steps)
            results.append(BenchResult(solver, steps, record.nfe, err, elapsed_ms))
    return results


def fit_order_slopes(results):
    """Least-squares slope of log(error) vs log(steps) per solver."""
    slopes = {}
    by_solver = {}
    for row in results:
        by_solver.setdefault(row.solver, []).append(row)
    for solver, rows in by_solver.items():
        if len(rows) < 2:
            raise InvalidInputError(f"need at least two step counts to fit {solver}")
        steps = np.log([r.steps for r in rows])
        errs = np.log([max(r.endpoint_error, 1e-300) for r in rows])
        slopes[solver] = float(-np.polyfit(steps, errs, 1)[0])
    return slopes


def write_benchmark_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["solver", "steps", "NFE", "endpoint_error", "wall_time_ms"])
        for r in results:
            writer.writerow([r.solver, r.steps, r.nfe, f"{r.endpoint_error:.9e}",
                             f"{r.wall_time_ms:.3f}"])


def format_table(results) -> str:
    lines = [f"{'solver':8s} {'steps':>5s} {'NFE':>5s} {'endpoint_error':>15s} {'ms':>9s}"]
    for r in results:
        lines.append(
            f"{r.solver:8s} {r.steps:5d} {r.nfe:5d} {r.endpoint_error:15.6e} {r.wall_time_ms:9.3f}"
        )
    return "\n".join(lines)
