"""Command-line entry point tying the pipeline stages together.

Every run writes a run directory containing the resolved config echo, the
seed, a version stamp, and step logs. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

import scmpde
from scmpde.config import RunConfig, echo_config, parse_config
from scmpde.datagen import Dataset, generate_dataset, load_dataset, save_dataset
from scmpde.evalbench import (
    ManifoldSpec,
    emit_report,
    eval_forward,
    eval_inverse,
    eval_unconditional,
    run_toy_experiment,
)
from scmpde.grid import Grid2D, GridField, JointState, PDEKind
from scmpde.inference import (
    benchmark_walltime,
    channel_mask,
    make_schedule,
    sample_unconditional,
    solve_constrained,
)
from scmpde.training import (
    load_checkpoint,
    pretrain_flow,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

__all__ = ["main", "dispatch"]


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return RunConfig()


def _make_run_dir(cfg: RunConfig, command: str, seed: int, argv) -> Path:
    root = cfg.output_root()
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = root / f"{command}-{stamp}-{seed}"
    i = 0
    while run_dir.exists():
        i += 1
        run_dir = root / f"{command}-{stamp}-{seed}.{i}"
    run_dir.mkdir(parents=True)
    echo_config(cfg, run_dir / "config_echo.txt")
    info = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "version": scmpde.__version__,
    }
    (run_dir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
    return run_dir


def _states_to_dataset(states: np.ndarray, ckpt) -> Dataset:
    grid = Grid2D(ckpt.grid_n)
    samples = [JointState.from_stack(grid, x) for x in states]
    return Dataset(ckpt.kind, grid, samples, ckpt.norm_stats)


def _render_grid(states: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = min(len(states), 8)
    fig, axes = plt.subplots(2, k, figsize=(2 * k, 4), squeeze=False)
    for j in range(k):
        axes[0][j].imshow(states[j, 0])
        axes[1][j].imshow(states[j, 1])
        axes[0][j].set_axis_off()
        axes[1][j].set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --- subcommand bodies -------------------------------------------------------


def _cmd_gen_data(args, argv) -> int:
    cfg = _load_config(args)
    kind = PDEKind(args.pde)
    ds = generate_dataset(kind, count=args.count, grid=Grid2D(args.n), seed=args.seed)
    out = Path(args.out)
    if out.exists():
        raise FileExistsError(f"refusing to overwrite existing dataset {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {args.count} {args.pde} samples at n={args.n} to {out}")
    return 0


def _cmd_pretrain(args, argv) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    run_dir = _make_run_dir(cfg, "pretrain", cfg["seed"], argv)
    ckpt, report = pretrain_flow(ds, cfg.train_config("pretrain"), cfg.net_spec())
    save_checkpoint(ckpt, args.out)
    report.write_csv(run_dir / "steps.csv")
    print(f"pretrain done: final loss {report.final_loss:.4e}; checkpoint {args.out}")
    return 0


def _cmd_train1(args, argv) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    init = load_checkpoint(args.init)
    run_dir = _make_run_dir(cfg, "train1", cfg["seed"], argv)
    ckpt, report = train_stage1(ds, cfg.train_config("stage1"), init)
    save_checkpoint(ckpt, args.out)
    report.write_csv(run_dir / "steps.csv")
    print(f"stage 1 done: final loss {report.final_loss:.4e}; checkpoint {args.out}")
    return 0


def _cmd_train2(args, argv) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    init = load_checkpoint(args.init)
    joint = args.joint or cfg["stage2.joint"]
    phase = "stage2_joint_ablation" if joint else "stage2"
    run_dir = _make_run_dir(cfg, "train2", cfg["seed"], argv)
    ckpt, report = train_stage2(ds, cfg.train_config(phase), init)
    save_checkpoint(ckpt, args.out)
    report.write_csv(run_dir / "steps.csv")
    print(f"stage 2 done ({phase}): final loss {report.final_loss:.4e}; checkpoint {args.out}")
    return 0


def _cmd_sample(args, argv) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = make_schedule(args.steps, cfg["sample.schedule"], sigma_d=model.sigma_d)
    n = ckpt.grid_n
    run = sample_unconditional(model, (2, n, n), schedule, seed=args.seed, count=args.count)
    phys = ckpt.norm_stats.invert(run.states.numpy().astype(np.float64))
    save_dataset(_states_to_dataset(phys, ckpt), out_dir / "samples.bin")
    if args.render:
        _render_grid(phys, out_dir / "samples.png")
    print(f"sampled {args.count} states with NFE {run.nfe} to {out_dir}")
    return 0


def _constrained_cmd(args, argv, observed: str, in_path) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    ds = load_dataset(in_path)
    if ds.grid.n != ckpt.grid_n:
        raise ValueError(f"grid mismatch: data n={ds.grid.n}, checkpoint n={ckpt.grid_n}")
    x = torch.as_tensor(ckpt.norm_stats.apply(ds.stacked()), dtype=torch.float32)
    mask = channel_mask(observed, ckpt.grid_n)
    schedule = make_schedule(args.steps, sigma_d=model.sigma_d)
    run = solve_constrained(model, x, mask, schedule, seed=args.seed)
    phys = ckpt.norm_stats.invert(run.states.numpy().astype(np.float64))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(_states_to_dataset(phys, ckpt), out_dir / "solutions.bin")
    print(f"solved {len(ds.samples)} states with NFE {run.nfe} to {out_dir}")
    return 0


def _cmd_solve_forward(args, argv) -> int:
    return _constrained_cmd(args, argv, "a", args.coeff)


def _cmd_invert(args, argv) -> int:
    return _constrained_cmd(args, argv, "u", args.solution)


def _parse_steps_list(s: str):
    return [int(v) for v in s.split(",") if v.strip()]


def _cmd_eval(args, argv) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.ckpt)
    steps = _parse_steps_list(args.steps)
    if args.task != "uncond" and not args.data:
        raise ValueError("--data is required for forward/inverse evaluation")
    run_dir = _make_run_dir(cfg, f"eval-{args.task}", args.seed, argv)
    if args.task == "uncond":
        rep = eval_unconditional(ckpt, count=args.count, nfe=steps[0], seed=args.seed)
    else:
        ds = load_dataset(args.data)
        fn = eval_forward if args.task == "forward" else eval_inverse
        rep = fn(ckpt, ds, steps, seed=args.seed)
    paths = emit_report(rep, run_dir)
    for key, agg in rep.summary.items():
        print(f"{args.task} @ {key}: {agg}")
    print(f"report in {run_dir} ({len(paths)} files)")
    return 0


def _cmd_toy(args, argv) -> int:
    cfg = _load_config(args)
    run_dir = _make_run_dir(cfg, f"toy-{args.shape}-{args.mode}", args.seed, argv)
    rep = run_toy_experiment(ManifoldSpec(shape=args.shape), mode=args.mode, seed=args.seed)
    emit_report(rep, run_dir)
    for tag, agg in rep.summary.items():
        print(f"{tag}: mean|g| {agg['mean_abs_g']:.4f}, coverage {agg['coverage']}/36")
    print(f"report in {run_dir}")
    return 0


def _cmd_bench(args, argv) -> int:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    run_dir = _make_run_dir(cfg, "bench", cfg["seed"], argv)
    rows = []
    n = ckpt.grid_n
    for N in _parse_steps_list(args.steps):
        row = benchmark_walltime(model, (2, n, n), N, repeats=args.repeats)
        rows.append(row)
        print(f"N={row['N']:4d}  NFE={row['nfe']:4d}  median {row['median_seconds']:.3f}s")
    with open(run_dir / "walltime.csv", "w") as f:
        f.write("N,nfe,median_seconds\n")
        for r in rows:
            f.write(f"{r['N']},{r['nfe']},{r['median_seconds']!r}\n")
    print(f"table in {run_dir}/walltime.csv")
    return 0


# --- parser and dispatch -----------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scmpde", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", default=None, help="key=value config file")
        return sp

    sp = add("gen-data", _cmd_gen_data, help="generate a PDE dataset")
    sp.add_argument("--pde", required=True, choices=["darcy", "poisson", "helmholtz"])
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--count", type=int, default=2048)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("pretrain", _cmd_pretrain, help="flow pretraining")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train1", _cmd_train1, help="consistency training (stage 1)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train2", _cmd_train2, help="physics min-max fine-tuning (stage 2)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--joint", action="store_true",
                    help="ablation: fine-tune without freezing the backbone")

    sp = add("sample", _cmd_sample, help="unconditional sampling")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--render", action="store_true")

    sp = add("solve-forward", _cmd_solve_forward, help="solve u given a")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--coeff", required=True)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="forward_out")

    sp = add("invert", _cmd_invert, help="infer a given u")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--solution", required=True)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="inverse_out")

    sp = add("eval", _cmd_eval, help="benchmark a checkpoint")
    sp.add_argument("--task", required=True, choices=["forward", "inverse", "uncond"])
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--steps", default="16,32,64")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("toy", _cmd_toy, help="2D toy-manifold study")
    sp.add_argument("--shape", default="circle",
                    choices=["circle", "ellipse", "double_ellipse"])
    sp.add_argument("--mode", default="two_stage",
                    choices=["two_stage", "direct_physics"])
    sp.add_argument("--seed", type=int, default=0)

    sp = add("bench", _cmd_bench, help="wall-clock sampling table")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--steps", default="16,64")
    sp.add_argument("--repeats", type=int, default=3)

    return p


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args, argv)
    except Exception as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
