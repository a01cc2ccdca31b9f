"""Three-phase optimization: flow pretraining, consistency training, and
physics-informed min-max fine-tuning.

Phase 1 fits the velocity network to the analytic TrigFlow tangent, which
makes the weight hand-off to consistency training exact (same parameterization,
same network). Phase 2 optimizes the adaptively weighted consistency loss.
Phase 3 freezes the encoder and coefficient decoder and plays a min-max game
between the model parameters (descent) and sigmoid-gated loss weights
(ascent), with PDE residuals evaluated on denormalized states.

The engine functions (`run_pretrain`, `run_stage1`, `run_stage2`) operate on a
plain tensor of training states plus an optional residual callback, so the 2D
toy-manifold study and the PDE problems share one code path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from scmpde.consistency import (
    TRAIN_T_MAX,
    ConsistencyModel,
    TimeProposal,
    forward_diffuse,
    sample_training_time,
    tangent_target,
    two_step_operator,
)
from scmpde.datagen import Dataset, NormStats
from scmpde.grid import PDEKind, residual_values
from scmpde.networks import (
    NetworkSpec,
    SplitDecoderNet,
    WeightHead,
    backbone_checksum,
    build_split_conv,
    freeze_backbone,
)

__all__ = [
    "TrainConfig",
    "SAWeights",
    "StageReport",
    "Checkpoint",
    "stage1_loss",
    "stage2_loss",
    "minmax_step",
    "make_pde_residual_fn",
    "pretrain_flow",
    "train_stage1",
    "train_stage2",
    "run_pretrain",
    "run_stage1",
    "run_stage2",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_VERSION = 1
PHASES = ("pretrain", "stage1", "stage2", "stage2_joint_ablation")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    lr: float = 1e-3
    lr_lambda: float = 1.0
    batch_size: int = 16
    epochs: int = 1
    lambda_init: tuple = (10.0, -10.0, -10.0)
    boundary_weight: float = 1.0
    p_mean: float = -1.0
    p_std: float = 1.4
    two_step_T: float = TRAIN_T_MAX
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    tangent_method: str = "jvp"
    # refinement-time draw for the two-step physics term: "proposal" reuses
    # the arctan-lognormal training-time proposal, "uniform" draws evenly from
    # t_prime_range instead
    t_prime_dist: str = "proposal"
    t_prime_range: tuple = (0.1, 1.3)
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.t_prime_dist not in ("uniform", "proposal"):
            raise ValueError(f"unknown t_prime_dist {self.t_prime_dist!r}")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size and epochs must be positive")

    @property
    def proposal(self) -> TimeProposal:
        return TimeProposal(self.p_mean, self.p_std)


class SAWeights:
    """Learnable loss gates sigma(lambda_i), updated by plain gradient ascent."""

    def __init__(self, lambda_init=(10.0, -10.0, -10.0)):
        self.lam = torch.as_tensor(lambda_init, dtype=torch.float64).clone()
        if self.lam.shape != (3,):
            raise ValueError("expected three lambda values")

    def gates(self) -> torch.Tensor:
        return torch.sigmoid(self.lam)

    def ascent(self, components, lr: float) -> None:
        """lambda_i += lr * d/dlambda_i [sigma(lambda_i) * C_i], C_i detached."""
        c = torch.as_tensor([float(v) for v in components], dtype=torch.float64)
        s = torch.sigmoid(self.lam)
        self.lam += lr * s * (1 - s) * c


@dataclass
class StageReport:
    phase: str
    records: list = field(default_factory=list)
    skipped: int = 0

    def log(self, **entry):
        if self.records and entry["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must be monotone")
        for v in entry.values():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"non-finite log entry: {entry}")
        self.records.append(entry)

    def write_csv(self, path) -> None:
        if not self.records:
            return
        keys = sorted({k for r in self.records for k in r}, key=str)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.records)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["loss"]


@dataclass
class Checkpoint:
    phase: str
    net_spec: NetworkSpec
    net_state: dict
    head_state: dict | None = None
    sa_lambda: list | None = None
    norm_stats: NormStats | None = None
    kind: PDEKind | None = None
    grid_n: int | None = None
    frozen: bool = False
    backbone_digest: str | None = None
    sigma_d: float = 1.0
    version: int = _CKPT_VERSION

    def build_net(self) -> SplitDecoderNet:
        from scmpde.networks import build_toy_mlp

        if self.net_spec.family == "toy_mlp":
            net = build_toy_mlp(self.net_spec)
        else:
            net = build_split_conv(self.net_spec)
        net.load_state_dict(self.net_state)
        return net

    def build_model(self) -> ConsistencyModel:
        return ConsistencyModel(self.build_net(), sigma_d=self.sigma_d)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "version": ckpt.version,
        "phase": ckpt.phase,
        "net_spec": ckpt.net_spec.to_dict(),
        "net_state": ckpt.net_state,
        "head_state": ckpt.head_state,
        "sa_lambda": ckpt.sa_lambda,
        "norm_stats": ckpt.norm_stats.to_dict() if ckpt.norm_stats else None,
        "kind": {"name": ckpt.kind.name, "k": ckpt.kind.k} if ckpt.kind else None,
        "grid_n": ckpt.grid_n,
        "frozen": ckpt.frozen,
        "backbone_digest": ckpt.backbone_digest,
        "sigma_d": ckpt.sigma_d,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return Checkpoint(
        phase=payload["phase"],
        net_spec=NetworkSpec.from_dict(payload["net_spec"]),
        net_state=payload["net_state"],
        head_state=payload["head_state"],
        sa_lambda=payload["sa_lambda"],
        norm_stats=NormStats.from_dict(payload["norm_stats"])
        if payload["norm_stats"]
        else None,
        kind=PDEKind(payload["kind"]["name"], k=payload["kind"]["k"])
        if payload["kind"]
        else None,
        grid_n=payload["grid_n"],
        frozen=payload["frozen"],
        backbone_digest=payload["backbone_digest"],
        sigma_d=payload["sigma_d"],
    )


# ---------------------------------------------------------------------------
# Losses


def _per_sample_sq(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).pow(2).sum(dim=1)


def stage1_loss(model: ConsistencyModel, head: WeightHead, x0, z, t, method="jvp",
                teacher: ConsistencyModel | None = None):
    """Adaptively weighted consistency loss e^w/D ||F - y||^2 - w, batch mean.

    The target comes from the stop-gradient teacher (defaults to the model
    itself with detached parameters).
    """
    y, x_t = tangent_target(teacher or model, x0, z, t, method=method)
    F = model.raw(x_t, t)
    D = x0[0].numel()
    w = head(torch.as_tensor(t, dtype=x0.dtype))
    per = torch.exp(w) / D * _per_sample_sq(F - y) - w
    return per.mean()


def make_pde_residual_fn(kind: PDEKind, grid_n: int, stats: NormStats):
    """Residual callback on normalized (B, 2, n, n) states.

    Returns (squared normalized residual norms, boundary penalties), both
    per-sample; residuals are evaluated on denormalized states so the physics
    lives in physical units.
    """
    h = 1.0 / (grid_n - 1)

    def fn(x: torch.Tensor):
        phys = stats.invert(x)
        a, u = phys[:, 0], phys[:, 1]
        R = residual_values(kind, a, u, h)
        res_sq = _per_sample_sq(R) * h**4  # (||R||_2 h^2)^2
        ring = (
            u[:, 0, :].pow(2).sum(1)
            + u[:, -1, :].pow(2).sum(1)
            + u[:, 1:-1, 0].pow(2).sum(1)
            + u[:, 1:-1, -1].pow(2).sum(1)
        )
        return res_sq, ring * h

    return fn


def stage2_loss(
    model: ConsistencyModel,
    sa: SAWeights,
    x0,
    z,
    t,
    z_two,
    z_prime,
    t_prime,
    residual_fn,
    cfg: TrainConfig,
    joint: bool = False,
    teacher: ConsistencyModel | None = None,
):
    """Min-max total loss and its raw components.

    total = g0 * consistency + g1 * (single-step residual + boundary penalty)
          + g2 * two-step residual,
    with the consistency and single-step terms sharing one (x0, z, t)
    trajectory. `joint` switches the consistency term from the u-channel mask
    to the full state (the joint-training ablation).
    """
    y, x_t = tangent_target(teacher or model, x0, z, t, method=cfg.tangent_method)
    F = model.raw(x_t, t)
    # per-dimension L2 so the consistency term lives on the same scale as the
    # residual terms (otherwise it drowns them by a factor of D)
    if joint or x0.ndim == 2:  # toy states have no channel split
        diff = F - y
    else:
        diff = F[:, 1:] - y[:, 1:]
    c0 = _per_sample_sq(diff).mean() / diff[0].numel()

    # single-step prediction reuses the same F evaluation (shared trajectory)
    tb = torch.as_tensor(t, dtype=x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
    x_hat = torch.cos(tb) * x_t - torch.sin(tb) * model.sigma_d * F
    res_sq, ring = residual_fn(x_hat)
    c1 = res_sq.mean() + cfg.boundary_weight * ring.mean()

    x_two = two_step_operator(model, z_two, z_prime, T=cfg.two_step_T, t_prime=t_prime)
    res2, _ = residual_fn(x_two)
    c2 = res2.mean()

    comps = (c0, c1, c2)
    for name, c in zip(("consistency", "single_step", "two_step"), comps):
        if not torch.isfinite(c):
            raise FloatingPointError(f"non-finite stage-2 component: {name}")
    gates = sa.gates().to(x0.dtype)
    total = gates[0] * c0 + gates[1] * c1 + gates[2] * c2
    return total, tuple(float(c.detach()) for c in comps)


def _assert_frozen_grads(net) -> None:
    if isinstance(net, SplitDecoderNet) and net.backbone_frozen:
        for p in net.backbone_parameters():
            if p.grad is not None and torch.any(p.grad != 0):
                raise AssertionError("gradient leaked into frozen backbone")


def minmax_step(model, opt, sa: SAWeights, loss_and_comps, cfg: TrainConfig):
    """One descent step on theta and one ascent step on lambda."""
    total, comps = loss_and_comps
    opt.zero_grad()
    total.backward()
    _assert_frozen_grads(model.net)
    params = [p for g in opt.param_groups for p in g["params"]]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
    opt.step()
    sa.ascent(comps, cfg.lr_lambda)
    return float(total.detach()), comps, grad_norm


# ---------------------------------------------------------------------------
# Epoch engines over a plain (N, ...) tensor of normalized training states


def _batches(n: int, bs: int, g: torch.Generator):
    perm = torch.randperm(n, generator=g)
    for i in range(0, n, bs):
        yield perm[i : i + bs]


def _times_and_noise(x0b, cfg, g, t_max=None):
    t = sample_training_time(
        g, cfg.proposal, batch=x0b.shape[0], t_max=t_max or math.pi / 2
    ).to(x0b.dtype)
    z = torch.randn(x0b.shape, generator=g, dtype=x0b.dtype)
    return t, z


def _guard(value: float, report: StageReport):
    if not math.isfinite(value):
        raise FloatingPointError(
            f"training diverged at step {len(report.records)} (phase {report.phase})"
        )


def run_pretrain(model: ConsistencyModel, data: torch.Tensor, cfg: TrainConfig):
    """Velocity matching: E || F(x_t, t) - (cos t z - sin t x0) ||^2 / D."""
    opt = torch.optim.AdamW(
        model.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    g = torch.Generator().manual_seed(cfg.seed)
    report = StageReport("pretrain")
    step = 0
    D = data[0].numel()
    for _ in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, g):
            x0b = data[idx]
            t, z = _times_and_noise(x0b, cfg, g)
            x_t, xdot = forward_diffuse(x0b, z, t)
            loss = (_per_sample_sq(model.raw(x_t, t) - xdot) / D).mean()
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.net.parameters(), cfg.grad_clip)
            opt.step()
            _guard(float(loss.detach()), report)
            report.log(step=step, loss=float(loss.detach()))
            step += 1
    return report


def run_stage1(model: ConsistencyModel, head: WeightHead, data: torch.Tensor, cfg):
    params = list(model.net.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    report = StageReport("stage1")
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, g):
            x0b = data[idx]
            t, z = _times_and_noise(x0b, cfg, g)
            try:
                loss = stage1_loss(model, head, x0b, z, t, method=cfg.tangent_method)
            except FloatingPointError:
                report.skipped += 1
                continue
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            _guard(float(loss.detach()), report)
            report.log(step=step, loss=float(loss.detach()))
            step += 1
    return report


def run_stage2(
    model: ConsistencyModel,
    sa: SAWeights,
    data: torch.Tensor,
    cfg: TrainConfig,
    residual_fn,
    joint: bool = False,
    checksum_fn=None,
):
    trainable = [p for p in model.net.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    report = StageReport(cfg.phase)
    step = 0
    digest0 = checksum_fn() if checksum_fn else None
    for _ in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, g):
            x0b = data[idx]
            t, z = _times_and_noise(x0b, cfg, g)
            z_two = torch.randn(x0b.shape, generator=g, dtype=x0b.dtype)
            z_prime = torch.randn(x0b.shape, generator=g, dtype=x0b.dtype)
            if cfg.t_prime_dist == "uniform":
                lo, hi = cfg.t_prime_range
                hi = min(hi, cfg.two_step_T)
                u = torch.rand(x0b.shape[0], generator=g)
                t_prime = (lo + (hi - lo) * u).to(x0b.dtype)
            else:
                t_prime = sample_training_time(
                    g, cfg.proposal, batch=x0b.shape[0], t_max=cfg.two_step_T
                ).to(x0b.dtype)
            lc = stage2_loss(
                model, sa, x0b, z, t, z_two, z_prime, t_prime, residual_fn, cfg,
                joint=joint,
            )
            total, comps, grad_norm = minmax_step(model, opt, sa, lc, cfg)
            _guard(total, report)
            gates = sa.gates()
            report.log(
                step=step,
                loss=total,
                consistency=comps[0],
                single_step=comps[1],
                two_step=comps[2],
                gate0=float(gates[0]),
                gate1=float(gates[1]),
                gate2=float(gates[2]),
                grad_norm=grad_norm,
                checksum_ok=int(checksum_fn() == digest0) if checksum_fn else 1,
            )
            step += 1
        if checksum_fn and checksum_fn() != digest0:
            raise AssertionError("frozen backbone changed during stage 2")
    return report


# ---------------------------------------------------------------------------
# Dataset-level phase wrappers


def _normalized_tensor(ds: Dataset) -> torch.Tensor:
    return torch.as_tensor(
        ds.norm_stats.apply(ds.stacked()), dtype=torch.float32
    )


def pretrain_flow(
    ds: Dataset, cfg: TrainConfig, spec: NetworkSpec | None = None
) -> tuple[Checkpoint, StageReport]:
    spec = spec or NetworkSpec()
    net = build_split_conv(spec, seed=cfg.seed)
    model = ConsistencyModel(net)
    report = run_pretrain(model, _normalized_tensor(ds), cfg)
    ckpt = Checkpoint(
        phase="pretrain",
        net_spec=spec,
        net_state=net.state_dict(),
        norm_stats=ds.norm_stats,
        kind=ds.kind,
        grid_n=ds.grid.n,
    )
    return ckpt, report


def train_stage1(
    ds: Dataset, cfg: TrainConfig, init_ckpt: Checkpoint
) -> tuple[Checkpoint, StageReport]:
    net = init_ckpt.build_net()
    model = ConsistencyModel(net)
    head = WeightHead()
    report = run_stage1(model, head, _normalized_tensor(ds), cfg)
    ckpt = Checkpoint(
        phase="stage1",
        net_spec=init_ckpt.net_spec,
        net_state=net.state_dict(),
        head_state=head.state_dict(),
        norm_stats=ds.norm_stats,
        kind=ds.kind,
        grid_n=ds.grid.n,
    )
    return ckpt, report


def train_stage2(
    ds: Dataset, cfg: TrainConfig, stage1_ckpt: Checkpoint
) -> tuple[Checkpoint, StageReport]:
    joint = cfg.phase == "stage2_joint_ablation"
    net = stage1_ckpt.build_net()
    model = ConsistencyModel(net)
    digest = None
    checksum_fn = None
    if not joint:
        digest = freeze_backbone(net)
        checksum_fn = lambda: backbone_checksum(net)
    sa = SAWeights(cfg.lambda_init)
    residual_fn = make_pde_residual_fn(ds.kind, ds.grid.n, ds.norm_stats)
    report = run_stage2(
        model, sa, _normalized_tensor(ds), cfg, residual_fn,
        joint=joint, checksum_fn=checksum_fn,
    )
    ckpt = Checkpoint(
        phase=cfg.phase,
        net_spec=stage1_ckpt.net_spec,
        net_state=net.state_dict(),
        head_state=stage1_ckpt.head_state,
        sa_lambda=[float(v) for v in sa.lam],
        norm_stats=ds.norm_stats,
        kind=ds.kind,
        grid_n=ds.grid.n,
        frozen=not joint,
        backbone_digest=digest,
    )
    return ckpt, report
