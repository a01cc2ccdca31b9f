"""Few-step consistency sampling and the projection-based constrained solver.

Unconditional sampling: one evaluation from pure noise, then renoise/denoise
refinements; a trailing schedule entry at t = 0 is treated as output (the map
is the identity there) and never spends an evaluation. The constrained solver
follows the measurement-projection loop exactly: initialize from noise,
predict, project, then N renoise/update/project iterations (NFE = N + 1), so
observed entries of the output match the observation bit-exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from scmpde.consistency import ConsistencyModel, consistency_output

__all__ = [
    "T0",
    "SIGMA_MAX",
    "SIGMA_MIN",
    "SampleRun",
    "make_schedule",
    "channel_mask",
    "project",
    "sample_unconditional",
    "solve_constrained",
    "benchmark_walltime",
]

T0 = math.pi / 2 - 1e-3
SIGMA_MAX = 80.0
SIGMA_MIN = 0.02


@dataclass
class SampleRun:
    states: torch.Tensor
    nfe: int
    seconds: float
    schedule: np.ndarray
    seed: int

    def __post_init__(self):
        if self.seconds < 0:
            raise ValueError("negative wall-clock time")


def make_schedule(N: int, kind: str = "sigma_uniform", sigma_d: float = 1.0) -> np.ndarray:
    """Strictly decreasing times t_0 > ... > t_N with t_0 = pi/2 - 1e-3, t_N = 0.

    `sigma_uniform` places interior times on a geometric noise ladder from
    SIGMA_MAX down to SIGMA_MIN mapped through t = arctan(sigma / sigma_d);
    `t_uniform` spaces them evenly in t.
    """
    if N < 1:
        raise ValueError("schedule needs N >= 1")
    if kind == "t_uniform":
        ts = np.linspace(T0, 0.0, N + 1)
    elif kind == "sigma_uniform":
        sigmas = SIGMA_MAX * (SIGMA_MIN / SIGMA_MAX) ** (np.arange(N + 1) / N)
        ts = np.arctan(sigmas / sigma_d)
        ts[0] = T0
        ts[-1] = 0.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not np.all(np.diff(ts) < 0):
        raise ValueError("schedule is not strictly decreasing")
    return ts


def channel_mask(observed: str, n: int) -> torch.Tensor:
    """Whole-channel mask on a (2, n, n) state; observed is 'a' or 'u'."""
    m = torch.zeros(2, n, n)
    m[{"a": 0, "u": 1}[observed]] = 1.0
    return m


def project(x_hat: torch.Tensor, x_obs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hard measurement projection M * x_obs + (1 - M) * x_hat; idempotent."""
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    return mask * x_obs + (1 - mask) * x_hat


def _validate(schedule: np.ndarray) -> None:
    if not np.all(np.diff(schedule) < 0):
        raise ValueError("schedule must be strictly decreasing")
    if schedule[0] > math.pi / 2 or schedule[-1] < 0:
        raise ValueError("schedule must lie within [0, pi/2]")


@torch.no_grad()
def sample_unconditional(
    model: ConsistencyModel,
    shape: tuple,
    schedule: np.ndarray,
    seed: int = 0,
    count: int = 1,
) -> SampleRun:
    """Multi-step unconditional sampling; skips the identity evaluation at t = 0."""
    _validate(schedule)
    g = torch.Generator().manual_seed(seed)
    start_evals = model.evals
    tic = time.perf_counter()
    z = torch.randn(count, *shape, generator=g)
    x_hat = consistency_output(model, model.sigma_d * z, schedule[0])
    for t_n in schedule[1:]:
        if t_n == 0.0:
            break
        z_n = torch.randn(count, *shape, generator=g)
        x_t = math.cos(t_n) * x_hat + math.sin(t_n) * model.sigma_d * z_n
        x_hat = consistency_output(model, x_t, t_n)
    toc = time.perf_counter()
    return SampleRun(x_hat, model.evals - start_evals, toc - tic, schedule, seed)


@torch.no_grad()
def solve_constrained(
    model: ConsistencyModel,
    x_obs: torch.Tensor,
    mask: torch.Tensor,
    schedule: np.ndarray,
    seed: int = 0,
) -> SampleRun:
    """Measurement-constrained consistency sampling (predict-project-renoise).

    x_obs may be a single state or a batch; observed entries must be finite.
    """
    _validate(schedule)
    if not torch.all(torch.isfinite(x_obs * mask)):
        raise ValueError("observed entries must be finite")
    batched = x_obs.ndim == mask.ndim + 1
    x_obs_b = x_obs if batched else x_obs[None]
    g = torch.Generator().manual_seed(seed)
    start_evals = model.evals
    tic = time.perf_counter()
    z = torch.randn(x_obs_b.shape, generator=g)
    x_t0 = model.sigma_d * z
    x_hat = consistency_output(model, x_t0, schedule[0])
    x_hat = project(x_hat, x_obs_b, mask)
    for t_n in schedule[1:]:
        z_n = torch.randn(x_obs_b.shape, generator=g)
        x_t = math.cos(t_n) * x_hat + math.sin(t_n) * model.sigma_d * z_n
        x_hat = consistency_output(model, x_t, t_n)
        x_hat = project(x_hat, x_obs_b, mask)
    toc = time.perf_counter()
    out = x_hat if batched else x_hat[0]
    return SampleRun(out, model.evals - start_evals, toc - tic, schedule, seed)


def benchmark_walltime(
    model: ConsistencyModel,
    shape: tuple,
    N: int,
    repeats: int = 3,
    mode: str = "constrained",
    schedule_kind: str = "sigma_uniform",
) -> dict:
    """Median wall-clock seconds per single-sample run, warm-up excluded."""
    schedule = make_schedule(N, schedule_kind, sigma_d=model.sigma_d)

    def one(seed):
        if mode == "constrained":
            obs = torch.zeros(shape)
            mask = torch.zeros(shape)
            mask[0] = 1.0  # first channel observed
            return solve_constrained(model, obs, mask, schedule, seed=seed)
        return sample_unconditional(model, shape, schedule, seed=seed, count=1)

    one(0)  # warm-up
    times, nfe = [], None
    for r in range(repeats):
        run = one(r + 1)
        times.append(run.seconds)
        nfe = run.nfe
    return {
        "N": N,
        "nfe": nfe,
        "repeats": repeats,
        "median_seconds": float(np.median(times)),
        "times": times,
    }
