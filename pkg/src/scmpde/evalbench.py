"""Evaluation pipelines: forward/inverse tables, unconditional residuals,
coefficient histograms, the 2D toy-manifold study, and report emission.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from scmpde.consistency import ConsistencyModel
from scmpde.datagen import Dataset
from scmpde.grid import (
    Grid2D,
    GridField,
    JointState,
    normalized_residual_norm,
    relative_h1,
    relative_l2,
)
from scmpde.inference import (
    channel_mask,
    make_schedule,
    sample_unconditional,
    solve_constrained,
)
from scmpde.networks import NetworkSpec, WeightHead, build_toy_mlp
from scmpde.training import (
    Checkpoint,
    SAWeights,
    TrainConfig,
    run_pretrain,
    run_stage1,
    run_stage2,
)

__all__ = [
    "EvalReport",
    "ManifoldSpec",
    "eval_forward",
    "eval_inverse",
    "eval_unconditional",
    "coeff_histogram",
    "angular_coverage",
    "run_toy_experiment",
    "emit_report",
]


@dataclass
class EvalReport:
    task: str
    rows: list = field(default_factory=list)       # per-sample records
    summary: dict = field(default_factory=dict)    # aggregates keyed by steps/nfe
    config: dict = field(default_factory=dict)
    figures: dict = field(default_factory=dict)    # name -> matplotlib figure

    def __post_init__(self):
        allowed = ("forward", "inverse", "unconditional", "toy", "bench")
        if self.task not in allowed:
            raise ValueError(f"unknown eval task {self.task!r}")

    def validate(self):
        if not self.rows:
            raise ValueError("empty report")
        for r in self.rows:
            for v in r.values():
                if isinstance(v, float) and not math.isfinite(v):
                    raise FloatingPointError(f"non-finite metric in {r}")
        return self


def _aggregate(values):
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "std": float(arr.std()),
        "count": int(arr.size),
    }


def _solve_batch(ckpt_model, ds: Dataset, observed: str, steps: int, seed: int):
    """Constrained solve over the whole test set in one batch; normalized in/out."""
    model, stats = ckpt_model
    x = ds.stacked()
    x_norm = torch.as_tensor(stats.apply(x), dtype=torch.float32)
    mask = channel_mask(observed, ds.grid.n)
    schedule = make_schedule(steps, sigma_d=model.sigma_d)
    run = solve_constrained(model, x_norm, mask, schedule, seed=seed)
    out = stats.invert(run.states.numpy().astype(np.float64))
    return out, run.nfe


def _model_from(ckpt: Checkpoint):
    return ckpt.build_model(), ckpt.norm_stats


def eval_forward(ckpt: Checkpoint, testset: Dataset, steps_list, seed: int = 0) -> EvalReport:
    """Solve u | a by constrained sampling; relative H1 of u against the classical solve."""
    rep = EvalReport("forward", config={"steps": list(steps_list), "count": len(testset.samples)})
    cm = _model_from(ckpt)
    for steps in steps_list:
        out, nfe = _solve_batch(cm, testset, "a", steps, seed)
        errs = []
        for i, s in enumerate(testset.samples):
            pred_u = GridField(testset.grid, out[i, 1])
            err = relative_h1(pred_u, s.u)
            rep.rows.append({"steps": steps, "nfe": nfe, "sample": i, "rel_h1": err})
            errs.append(err)
        rep.summary[steps] = {**_aggregate(errs), "nfe": nfe}
    return rep.validate()


def eval_inverse(ckpt: Checkpoint, testset: Dataset, steps_list, seed: int = 0) -> EvalReport:
    """Infer a | u by constrained sampling; relative L2 of the source channel."""
    if testset.kind.name == "darcy":
        raise ValueError("inverse benchmark covers Poisson/Helmholtz only")
    rep = EvalReport("inverse", config={"steps": list(steps_list), "count": len(testset.samples)})
    cm = _model_from(ckpt)
    for steps in steps_list:
        out, nfe = _solve_batch(cm, testset, "u", steps, seed)
        errs = []
        for i, s in enumerate(testset.samples):
            pred_a = GridField(testset.grid, out[i, 0])
            err = relative_l2(pred_a, s.a)
            rep.rows.append({"steps": steps, "nfe": nfe, "sample": i, "rel_l2": err})
            errs.append(err)
        rep.summary[steps] = {**_aggregate(errs), "nfe": nfe}
    return rep.validate()


def eval_unconditional(ckpt: Checkpoint, count: int, nfe: int = 2, seed: int = 0) -> EvalReport:
    """Residual quality of free-form samples at a fixed evaluation budget.

    Sampled Darcy coefficients are floored at a small positive value before
    residual evaluation (ellipticity requires a > 0); the fraction of floored
    pixels is reported so a degenerate model cannot hide behind the floor.
    """
    rep = EvalReport("unconditional", config={"count": count, "nfe": nfe})
    model, stats = _model_from(ckpt)
    n = ckpt.grid_n
    schedule = make_schedule(nfe, sigma_d=model.sigma_d)
    run = sample_unconditional(model, (2, n, n), schedule, seed=seed, count=count)
    phys = stats.invert(run.states.numpy().astype(np.float64))
    a_floor = 1e-3
    floored = float(np.mean(phys[:, 0] < a_floor))
    phys[:, 0] = np.maximum(phys[:, 0], a_floor)
    rep.config["floored_fraction"] = floored
    g = Grid2D(n)
    vals = []
    for i in range(count):
        state = JointState(GridField(g, phys[i, 0]), GridField(g, phys[i, 1]))
        r = normalized_residual_norm(ckpt.kind, state)
        rep.rows.append({"sample": i, "nfe": run.nfe, "residual": r})
        vals.append(r)
    rep.summary[run.nfe] = _aggregate(vals)
    rep.figures["sample_panels"] = _residual_panels(ckpt.kind, g, phys[: min(3, count)])
    return rep.validate()


def _residual_panels(kind, grid, phys):
    """Rows of (a, u, |R|) panels for a few samples."""
    from scmpde.grid import residual

    k = len(phys)
    fig, axes = plt.subplots(k, 3, figsize=(9, 3 * k), squeeze=False)
    for i in range(k):
        a = GridField(grid, phys[i, 0])
        u = GridField(grid, phys[i, 1])
        r = residual(kind, JointState(a, u))
        for j, (fieldv, title) in enumerate(
            [(a.values, "a"), (u.values, "u"), (np.abs(r.values), "|R|")]
        ):
            im = axes[i][j].imshow(fieldv)
            axes[i][j].set_title(title)
            fig.colorbar(im, ax=axes[i][j], shrink=0.7)
    fig.tight_layout()
    return fig


def coeff_histogram(states: np.ndarray, bins: int = 60):
    """Pixel-value histogram of Darcy a-channels with bimodality masses.

    `states` is (count, 2, n, n) in physical units. Reports the probability
    mass within +-1 of each coefficient level {3, 12} and their ratio.
    """
    if len(states) == 0:
        raise ValueError("empty input")
    a = np.asarray(states)[:, 0].ravel()
    hist, edges = np.histogram(a, bins=bins)
    mass_low = float(np.mean(np.abs(a - 3.0) <= 1.0))
    mass_high = float(np.mean(np.abs(a - 12.0) <= 1.0))
    ratio = mass_low / mass_high if mass_high > 0 else float("inf")
    return {
        "hist": hist,
        "edges": edges,
        "mass_low": mass_low,
        "mass_high": mass_high,
        "ratio": ratio,
    }


# ---------------------------------------------------------------------------
# Toy-manifold study


@dataclass(frozen=True)
class ManifoldSpec:
    shape: str = "circle"               # circle | ellipse | double_ellipse
    radius: float = 1.0
    axes: tuple = (1.0, 0.6)
    centers: tuple = ((-1.2, 0.0), (1.2, 0.0))

    def __post_init__(self):
        if self.shape not in ("circle", "ellipse", "double_ellipse"):
            raise ValueError(f"unknown manifold shape {self.shape!r}")

    def constraint(self, x: torch.Tensor) -> torch.Tensor:
        """Algebraic constraint g(x); g = 0 on the manifold."""
        a, b = self.axes
        if self.shape == "circle":
            return x[:, 0] ** 2 + x[:, 1] ** 2 - self.radius**2
        if self.shape == "ellipse":
            return (x[:, 0] / a) ** 2 + (x[:, 1] / b) ** 2 - 1.0
        gs = []
        for cx, cy in self.centers:
            gs.append(((x[:, 0] - cx) / a) ** 2 + ((x[:, 1] - cy) / b) ** 2 - 1.0)
        return gs[0] * gs[1]

    def component_centers(self):
        if self.shape == "double_ellipse":
            return [np.array(c) for c in self.centers]
        return [np.zeros(2)]

    def sample_points(self, count: int, seed: int = 0) -> torch.Tensor:
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0, 2 * np.pi, size=count)
        a, b = self.axes
        if self.shape == "circle":
            pts = self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        elif self.shape == "ellipse":
            pts = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1)
        else:
            which = rng.integers(0, len(self.centers), size=count)
            pts = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1)
            pts += np.asarray(self.centers)[which]
        return torch.as_tensor(pts, dtype=torch.float32)


def angular_coverage(samples: np.ndarray, center, n_bins: int = 36, offset: float = 0.0) -> int:
    """Number of equal angle bins about `center` containing at least one sample."""
    rel = np.asarray(samples) - np.asarray(center)
    ang = (np.arctan2(rel[:, 1], rel[:, 0]) - offset) % (2 * np.pi)
    idx = np.floor(ang / (2 * np.pi / n_bins)).astype(int)
    return int(len(np.unique(np.clip(idx, 0, n_bins - 1))))


def _toy_coverage(spec: ManifoldSpec, samples: np.ndarray, n_bins: int = 36) -> int:
    return min(angular_coverage(samples, c, n_bins) for c in spec.component_centers())


def _toy_two_step_samples(model, count, seed):
    schedule = make_schedule(2)
    run = sample_unconditional(model, (2,), schedule, seed=seed, count=count)
    return run.states


def run_toy_experiment(
    spec: ManifoldSpec,
    mode: str = "two_stage",
    n_train: int = 4096,
    pretrain_epochs: int = 40,
    stage1_epochs: int = 30,
    stage2_epochs: int = 15,
    batch_size: int = 128,
    n_eval: int = 2000,
    seed: int = 0,
    stage2_lr_lambda: float = 1000.0,
) -> EvalReport:
    """Train a toy consistency model on a 2D manifold and score |g| and coverage.

    `two_stage` runs flow pretraining, consistency training, then min-max
    physics fine-tuning with g(x)^2 replacing the PDE residual (both
    coordinates stay trainable; there is no coefficient/solution split in 2D).
    `direct_physics` optimizes the composite objective from random
    initialization.

    The toy residual g^2 is O(1) rather than O(1e2) like the PDE residuals,
    so the lambda ascent needs a much larger step size here for the physics
    gates to open within the short run.
    """
    if mode not in ("two_stage", "direct_physics"):
        raise ValueError(f"unknown toy mode {mode!r}")
    data = spec.sample_points(n_train, seed=seed)
    net = build_toy_mlp(NetworkSpec(family="toy_mlp"), seed=seed)
    model = ConsistencyModel(net)

    def residual_fn(x):
        g = spec.constraint(x)
        return g**2, torch.zeros_like(g)

    rep = EvalReport(
        "toy",
        config={
            "shape": spec.shape,
            "mode": mode,
            "n_train": n_train,
            "seed": seed,
            "epochs": [pretrain_epochs, stage1_epochs, stage2_epochs],
        },
    )

    def score(tag, s):
        pts = _toy_two_step_samples(model, n_eval, seed + 123)
        g_abs = torch.abs(spec.constraint(pts)).mean().item()
        cov = _toy_coverage(spec, pts.numpy())
        rep.rows.append({"stage": tag, "mean_abs_g": g_abs, "coverage": cov})
        rep.summary[tag] = {"mean_abs_g": g_abs, "coverage": cov}
        return pts

    if mode == "two_stage":
        run_pretrain(
            model, data,
            TrainConfig(phase="pretrain", epochs=pretrain_epochs,
                        batch_size=batch_size, seed=seed),
        )
        head = WeightHead()
        run_stage1(
            model, head, data,
            TrainConfig(phase="stage1", epochs=stage1_epochs,
                        batch_size=batch_size, lr=3e-4, seed=seed),
        )
        score("stage1", None)
        sa = SAWeights()
        run_stage2(
            model, sa, data,
            TrainConfig(phase="stage2", epochs=stage2_epochs, batch_size=batch_size,
                        lr=1e-4, lr_lambda=stage2_lr_lambda,
                        boundary_weight=0.0, seed=seed),
            residual_fn,
        )
        pts = score("stage2", None)
    else:
        sa = SAWeights()
        run_stage2(
            model, sa, data,
            TrainConfig(
                phase="stage2",
                epochs=pretrain_epochs + stage1_epochs + stage2_epochs,
                batch_size=batch_size, lr=3e-4, lr_lambda=stage2_lr_lambda,
                boundary_weight=0.0, seed=seed,
            ),
            residual_fn,
        )
        pts = score("direct_physics", None)

    fig, ax = plt.subplots(figsize=(5, 5))
    p = pts.numpy()
    d = data.numpy()
    ax.scatter(d[:, 0], d[:, 1], s=2, alpha=0.2, label="data")
    ax.scatter(p[:, 0], p[:, 1], s=2, alpha=0.4, label="samples")
    ax.set_aspect("equal")
    ax.legend()
    rep.figures["samples"] = fig
    return rep.validate()


# ---------------------------------------------------------------------------
# Report emission


def emit_report(report: EvalReport, out_dir) -> list:
    """Write CSV, a plain-text summary, and figure PNGs; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / f"{report.task}_results.csv"
    keys = sorted({k for r in report.rows for k in r}, key=str)
    with open(csv_path, "w") as f:
        f.write(",".join(keys) + "\n")
        for r in report.rows:
            f.write(",".join(repr(r.get(k, "")) for k in keys) + "\n")
    written.append(csv_path)

    txt_path = out / f"{report.task}_summary.txt"
    with open(txt_path, "w") as f:
        f.write(f"task: {report.task}\n")
        for k, v in report.config.items():
            f.write(f"config {k}: {v}\n")
        for key, agg in report.summary.items():
            f.write(f"{key}: {agg}\n")
    written.append(txt_path)

    for name, fig in report.figures.items():
        fig_path = out / f"{report.task}_{name}.png"
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        written.append(fig_path)
    return written


def load_report_csv(path) -> list:
    """Reload an emitted CSV into row dicts with evaluated literals."""
    import ast

    rows = []
    with open(path) as f:
        keys = f.readline().strip().split(",")
        for line in f:
            vals = [ast.literal_eval(v) for v in line.strip().split(",")]
            rows.append(dict(zip(keys, vals)))
    return rows
