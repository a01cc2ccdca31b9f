"""TrigFlow parameterization, noising, tangent targets, and the two-step operator.

The consistency map is f(x, t) = cos(t) x - sin(t) sigma_d F(x / sigma_d, t)
for t in [0, pi/2], so f(x, 0) = x holds exactly by construction. All noise
draws are sigma_d-scaled (sigma_d = 1 after channel standardization).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import torch

__all__ = [
    "T_MAX",
    "TRAIN_T_MAX",
    "ConsistencyModel",
    "forward_diffuse",
    "consistency_output",
    "tangent_target",
    "sample_training_time",
    "two_step_operator",
    "TimeProposal",
]

T_MAX = math.pi / 2
# two-step evaluations during training use T slightly below pi/2 so cos(T) != 0
TRAIN_T_MAX = 1.56


def _expand(t, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample time against a batched state."""
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.ndim == 0:
        return t
    return t.view(-1, *([1] * (x.ndim - 1)))


def _check_time(t) -> None:
    tv = torch.as_tensor(t)
    if torch.any(tv < 0) or torch.any(tv > T_MAX + 1e-12):
        raise ValueError(f"time must lie in [0, pi/2], got {tv}")


class ConsistencyModel:
    """TrigFlow-parameterized denoiser wrapping a velocity network.

    Keeps an atomically updated count of network evaluations for NFE
    accounting; the network itself may be shared read-only across threads.
    """

    def __init__(self, net, sigma_d: float = 1.0):
        if sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        self.net = net
        self.sigma_d = float(sigma_d)
        self._evals = 0
        self._lock = threading.Lock()

    @property
    def evals(self) -> int:
        return self._evals

    def _count(self, k: int = 1) -> None:
        with self._lock:
            self._evals += k

    def raw(self, x: torch.Tensor, t) -> torch.Tensor:
        """The network F(x / sigma_d, t), without counting an evaluation."""
        return self.net(x / self.sigma_d, t)

    def f(self, x: torch.Tensor, t) -> torch.Tensor:
        """The consistency map without evaluation counting (training internals)."""
        tb = _expand(t, x)
        return torch.cos(tb) * x - torch.sin(tb) * self.sigma_d * self.raw(x, t)

    def __call__(self, x, t):
        return consistency_output(self, x, t)


def forward_diffuse(x0: torch.Tensor, z: torch.Tensor, t):
    """Noised state x_t = cos(t) x0 + sin(t) z and its tangent cos(t) z - sin(t) x0."""
    if x0.shape != z.shape:
        raise ValueError("x0 and z must share a shape")
    _check_time(t)
    tb = _expand(t, x0)
    x_t = torch.cos(tb) * x0 + torch.sin(tb) * z
    xdot = torch.cos(tb) * z - torch.sin(tb) * x0
    return x_t, xdot


def consistency_output(model: ConsistencyModel, x_t: torch.Tensor, t) -> torch.Tensor:
    """Evaluate f(x_t, t); increments the model's evaluation counter by 1."""
    _check_time(t)
    out = model.f(x_t, t)
    model._count()
    if not torch.all(torch.isfinite(out)):
        raise FloatingPointError("non-finite consistency output")
    return out


def tangent_target(
    model: ConsistencyModel,
    x0: torch.Tensor,
    z: torch.Tensor,
    t,
    method: str = "jvp",
    eps: float = 1e-3,
):
    """Teacher-side consistency target y_t, computed under stop-gradient.

    y_t = F(x_t / sigma_d, t) + cos(t) * d/ds f(x_t + s xdot, t + s)|_{s=0},
    with the directional derivative taken by exact forward-mode differentiation
    ("jvp") or by central finite differences along the normalized joint
    direction ("fd").

    Returns (y_t, x_t); both detached from any trainable parameters.
    """
    x_t, xdot = forward_diffuse(x0, z, t)
    x_t = x_t.detach()
    xdot = xdot.detach()
    t_in = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)

    with torch.no_grad():
        if method == "jvp":
            t_dir = torch.ones_like(t_in)
            _, df = torch.func.jvp(
                lambda xx, tt: model.f(xx, tt), (x_t, t_in), (xdot, t_dir)
            )
        elif method == "fd":
            norm = math.sqrt(float(torch.sum(xdot * xdot)) + 1.0)
            step = eps / norm
            f_plus = model.f(x_t + step * xdot, t_in + step)
            f_minus = model.f(x_t - step * xdot, t_in - step)
            df = (f_plus - f_minus) / (2 * step)
        else:
            raise ValueError(f"unknown tangent method {method!r}")
        tb = _expand(t_in, x_t)
        y = model.raw(x_t, t_in) + torch.cos(tb) * df
    if not torch.all(torch.isfinite(y)):
        raise FloatingPointError(f"non-finite tangent target at t={t}")
    return y.detach(), x_t


@dataclass(frozen=True)
class TimeProposal:
    """Log-normal-through-arctan proposal for training times."""

    p_mean: float = -1.0
    p_std: float = 1.4


def sample_training_time(
    generator: torch.Generator,
    proposal: TimeProposal,
    batch: int = 1,
    sigma_d: float = 1.0,
    t_max: float = T_MAX,
) -> torch.Tensor:
    """Draw t = arctan(e^tau / sigma_d), tau ~ N(p_mean, p_std); t in (0, t_max)."""
    tau = (
        torch.randn(batch, generator=generator, dtype=torch.float64) * proposal.p_std
        + proposal.p_mean
    )
    t = torch.atan(torch.exp(tau) / sigma_d)
    return torch.clamp(t, max=t_max - 1e-6)


def two_step_operator(
    model: ConsistencyModel,
    z: torch.Tensor,
    z_prime: torch.Tensor,
    T: float = TRAIN_T_MAX,
    t_prime: float = 0.0,
):
    """Re-noised second application of the consistency map; exactly 2 evaluations.

    f_hat(z, z'; T, t') = f( sin(t') z' + cos(t') f(z, T), t' ).
    """
    tp = torch.as_tensor(t_prime)
    if torch.any(tp >= torch.as_tensor(T)):
        raise ValueError("t_prime must be strictly below T")
    x_hat = consistency_output(model, z, T)
    tb = _expand(t_prime, x_hat)
    x_tp = torch.sin(tb) * z_prime + torch.cos(tb) * x_hat
    return consistency_output(model, x_tp, t_prime)
