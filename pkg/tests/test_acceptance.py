"""Acceptance suite: one test per shipped criterion, each printing a
PASS/FAIL line (bypassing capture so the lines always show).

The two trend criteria (toy manifold, desk-scale Darcy) run real training and
dominate the runtime; everything else completes in seconds.
"""

import math
import sys
import time

import numpy as np
import pytest
import torch

from scmpde.consistency import (
    ConsistencyModel,
    consistency_output,
    forward_diffuse,
    tangent_target,
)
from scmpde.datagen import generate_dataset, solve_forward
from scmpde.evalbench import (
    ManifoldSpec,
    coeff_histogram,
    emit_report,
    eval_forward,
    eval_unconditional,
    run_toy_experiment,
)
from scmpde.grid import (
    Grid2D,
    GridField,
    JointState,
    PDEKind,
    h1_norm,
    relative_h1,
    relative_l2,
    residual,
)
from scmpde.inference import (
    benchmark_walltime,
    channel_mask,
    make_schedule,
    sample_unconditional,
    solve_constrained,
)
from scmpde.networks import NetworkSpec, build_split_conv, build_toy_mlp
from scmpde.training import (
    SAWeights,
    TrainConfig,
    pretrain_flow,
    train_stage1,
    train_stage2,
)


def report(num, desc, passed, detail=""):
    line = f"criterion {num:2d} [{'PASS' if passed else 'FAIL'}] {desc}"
    if detail:
        line += f" -- {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert passed, line


# --- 1: parameterization boundary -------------------------------------------


def test_criterion_1_identity_at_t0():
    tic = time.time()
    results = {}
    for dtype, tol in ((torch.float32, 1e-6), (torch.float64, 1e-12)):
        net = build_toy_mlp(NetworkSpec(family="toy_mlp"), seed=3).to(dtype)
        model = ConsistencyModel(net)
        x = torch.randn(1000, 2, dtype=dtype, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            out = consistency_output(model, x, 0.0)
        rel = (out - x).abs() / x.abs().clamp_min(1e-30)
        results[str(dtype)] = (float(rel.max()), tol)
    elapsed = time.time() - tic
    ok = all(v <= tol for v, tol in results.values()) and elapsed < 10
    report(1, "f(x, 0) = x for 1000 random states", ok,
           f"max rel dev {results}, {elapsed:.1f}s")


# --- 2: discretization order --------------------------------------------------


def _manufactured_residual_max(kind, n):
    g = Grid2D(n)
    x, y = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    u = np.sin(np.pi * x) * np.sin(np.pi * y)
    if kind.name == "poisson":
        a = -2 * np.pi**2 * u
    else:
        a = (kind.k**2 - 2 * np.pi**2) * u
    r = residual(kind, JointState(GridField(g, a), GridField(g, u)))
    return np.abs(r.values).max()


def test_criterion_2_discretization_order():
    tic = time.time()
    orders = {}
    for kind in (PDEKind("poisson"), PDEKind("helmholtz", k=2.0)):
        norms = [_manufactured_residual_max(kind, n) for n in (17, 33, 65)]
        orders[kind.name] = [math.log2(norms[i] / norms[i + 1]) for i in range(2)]
    rng = np.random.default_rng(0)
    g = Grid2D(33)
    vals = np.where(rng.standard_normal((33, 33)) > 0, 12.0, 3.0)
    a = GridField(g, vals)
    u = solve_forward(PDEKind("darcy"), a)
    from scmpde.grid import normalized_residual_norm

    darcy_res = normalized_residual_norm(PDEKind("darcy"), JointState(a, u))
    elapsed = time.time() - tic
    ok = (
        all(1.8 <= o <= 2.2 for os in orders.values() for o in os)
        and darcy_res <= 1e-8
        and elapsed < 30
    )
    report(2, "5-point stencil order in [1.8, 2.2]; Darcy solve residual <= 1e-8",
           ok, f"orders {orders}, darcy {darcy_res:.2e}, {elapsed:.1f}s")


# --- 3: metric exactness ------------------------------------------------------


def _h1_bruteforce(e: GridField) -> float:
    n, h = e.grid.n, e.grid.h
    v = e.values
    total = 0.0
    for i in range(n):
        for j in range(n):
            if 0 < i < n - 1:
                gx = (v[i + 1, j] - v[i - 1, j]) / (2 * h)
            elif i == 0:
                gx = (v[1, j] - v[0, j]) / h
            else:
                gx = (v[n - 1, j] - v[n - 2, j]) / h
            if 0 < j < n - 1:
                gy = (v[i, j + 1] - v[i, j - 1]) / (2 * h)
            elif j == 0:
                gy = (v[i, 1] - v[i, 0]) / h
            else:
                gy = (v[i, n - 1] - v[i, n - 2]) / h
            total += (v[i, j] ** 2 + gx**2 + gy**2) * h**2
    return math.sqrt(total)


def test_criterion_3_metric_exactness():
    tic = time.time()
    rng = np.random.default_rng(1)
    g = Grid2D(17)
    worst_pair = worst_h1 = 0.0
    for _ in range(20):
        f = GridField(g, rng.standard_normal((17, 17)))
        worst_pair = max(
            worst_pair,
            abs(relative_h1(f, f)),
            abs(relative_l2(f, f)),
            abs(relative_h1(GridField(g, np.zeros((17, 17))), f) - 1.0),
            abs(relative_l2(GridField(g, np.zeros((17, 17))), f) - 1.0),
        )
        worst_h1 = max(worst_h1, abs(h1_norm(f) - _h1_bruteforce(f)))
    elapsed = time.time() - tic
    ok = worst_pair <= 1e-12 and worst_h1 <= 1e-12 and elapsed < 10
    report(3, "metrics exact at 0/1; H1 matches brute-force oracle", ok,
           f"pair dev {worst_pair:.2e}, H1 dev {worst_h1:.2e}, {elapsed:.1f}s")


# --- 4: tangent correctness ---------------------------------------------------


def test_criterion_4_tangent_vs_finite_differences():
    tic = time.time()
    net = build_toy_mlp(NetworkSpec(family="toy_mlp", hidden=64, depth=3), seed=5)
    net = net.double()
    model = ConsistencyModel(net)
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(10):  # 10 batches of 10 = 100 random triples
        x0 = torch.randn(10, 2, generator=gen, dtype=torch.float64)
        z = torch.randn(10, 2, generator=gen, dtype=torch.float64)
        t = torch.rand(10, generator=gen, dtype=torch.float64) * 1.4 + 0.05
        y_jvp, _ = tangent_target(model, x0, z, t, method="jvp")
        y_fd, _ = tangent_target(model, x0, z, t, method="fd", eps=1e-3)
        rel = (y_jvp - y_fd).norm() / y_jvp.norm().clamp_min(1e-30)
        worst = max(worst, float(rel))
    elapsed = time.time() - tic
    ok = worst <= 1e-3 and elapsed < 60
    report(4, "jvp tangent matches central FD (eps=1e-3) to rel 1e-3", ok,
           f"worst rel {worst:.2e}, {elapsed:.1f}s")


# --- shared small Darcy fixtures ---------------------------------------------

SMALL_SPEC = NetworkSpec(widths=(8, 16, 32), time_dim=16)


@pytest.fixture(scope="module")
def small_darcy():
    return generate_dataset(PDEKind("darcy"), count=160, grid=Grid2D(32), seed=3)


@pytest.fixture(scope="module")
def small_stage1(small_darcy):
    ck0, _ = pretrain_flow(
        small_darcy, TrainConfig(phase="pretrain", epochs=2, seed=0), SMALL_SPEC
    )
    ck1, _ = train_stage1(
        small_darcy, TrainConfig(phase="stage1", epochs=1, seed=0), ck0
    )
    return ck1


# --- 5: frozen contract -------------------------------------------------------


def test_criterion_5_frozen_contract(small_darcy, small_stage1):
    tic = time.time()
    # 160 samples / batch 16 = 10 steps per epoch; 20 epochs = 200 audited steps
    ck2, rep = train_stage2(
        small_darcy,
        TrainConfig(phase="stage2", lr=1e-4, epochs=20, seed=0),
        small_stage1,
    )
    steps = len(rep.records)
    all_ok = all(r["checksum_ok"] for r in rep.records)
    digest_now = ck2.backbone_digest is not None
    elapsed = time.time() - tic
    # minmax_step raises if any frozen parameter ever receives a gradient, so
    # reaching this point certifies the zero-gradient audit at every step.
    ok = steps >= 200 and all_ok and digest_now and elapsed < 600
    report(5, "200-step stage 2 keeps checksum(E, D_a) bit-identical", ok,
           f"{steps} steps, checksum_ok at all: {all_ok}, {elapsed:.0f}s")
    test_criterion_5_frozen_contract.records = rep.records


# --- 6: min-max dynamics ------------------------------------------------------


def test_criterion_6_minmax_dynamics(small_darcy, small_stage1):
    tic = time.time()
    sa = SAWeights((10.0, -10.0, -10.0))
    gates = sa.gates().numpy()
    # exact values sigma(+-10) to 1e-9; the quoted decimals (0.9999546,
    # 4.5398e-5) are those same values rounded to their printed precision
    exact = 1.0 / (1.0 + np.exp(np.array([-10.0, 10.0, 10.0])))
    init_dev = np.abs(gates - exact).max()
    quoted = np.array([0.9999546, 4.5398e-5, 4.5398e-5])
    quoted_dev = np.abs(gates - quoted)
    quoted_ok = quoted_dev[0] <= 5e-8 and np.all(quoted_dev[1:] <= 1e-9)

    records = getattr(test_criterion_5_frozen_contract, "records", None)
    if records is None:  # criterion 5 not run first; do a short run
        _, rep = train_stage2(
            small_darcy, TrainConfig(phase="stage2", lr=1e-4, epochs=2, seed=0),
            small_stage1,
        )
        records = rep.records
    comp_keys = ("consistency", "single_step", "two_step")
    gate_keys = ("gate0", "gate1", "gate2")
    violations = 0
    for prev, cur in zip(records, records[1:]):
        for ck, gk in zip(comp_keys, gate_keys):
            if cur[ck] > 0 and cur[gk] < prev[gk] - 1e-15:
                violations += 1
    elapsed = time.time() - tic
    ok = init_dev <= 1e-9 and quoted_ok and violations == 0 and elapsed < 300
    report(6, "initial gates exact to 1e-9; lambda non-decreasing on positive components",
           ok, f"init dev {init_dev:.2e} (vs quoted {quoted_dev.max():.2e}), "
               f"violations {violations}, {elapsed:.0f}s")


# --- 7: constrained-sampling conformance -------------------------------------


def test_criterion_7_algorithm_conformance(small_darcy):
    tic = time.time()
    net = build_split_conv(SMALL_SPEC, seed=1)
    model = ConsistencyModel(net)
    x = torch.as_tensor(
        small_darcy.norm_stats.apply(small_darcy.stacked()[:2]), dtype=torch.float32
    )
    mask = channel_mask("a", 32)
    nfes, exact, deterministic = {}, True, True
    for N in (1, 16, 64):
        sched = make_schedule(N)
        run = solve_constrained(model, x, mask, sched, seed=N)
        rerun = solve_constrained(model, x, mask, sched, seed=N)
        nfes[N] = run.nfe
        exact &= bool(torch.all(mask * (run.states - x) == 0))
        deterministic &= torch.equal(run.states, rerun.states)
    elapsed = time.time() - tic
    ok = (
        all(nfes[N] == N + 1 for N in (1, 16, 64))
        and exact and deterministic and elapsed < 300
    )
    report(7, "NFE = N + 1; projection exact; seeds bit-reproducible", ok,
           f"nfes {nfes}, exact {exact}, deterministic {deterministic}, {elapsed:.0f}s")


# --- 8: toy-manifold trend ----------------------------------------------------


def test_criterion_8_toy_manifold_trend(tmp_path):
    tic = time.time()
    spec = ManifoldSpec(shape="circle")
    rep = run_toy_experiment(spec, mode="two_stage", seed=0)
    direct = run_toy_experiment(spec, mode="direct_physics", seed=0)
    emit_report(rep, tmp_path)
    cov = rep.summary["stage2"]["coverage"]
    g1 = rep.summary["stage1"]["mean_abs_g"]
    g2 = rep.summary["stage2"]["mean_abs_g"]
    direct_cov = direct.summary["direct_physics"]["coverage"]
    elapsed = time.time() - tic
    ok = cov >= 32 and g2 <= 0.5 * g1 and elapsed < 900
    report(8, "toy: coverage >= 32/36 and stage-2 |g| <= 0.5 x stage-1 |g|", ok,
           f"coverage {cov}/36, |g| {g1:.4f} -> {g2:.4f} "
           f"(direct coverage {direct_cov}/36), {elapsed:.0f}s")


# --- 9 & 10: desk-scale Darcy trend ------------------------------------------


@pytest.fixture(scope="module")
def darcy_pipeline():
    tic = time.time()
    kind = PDEKind("darcy")
    train_ds = generate_dataset(kind, 2048, Grid2D(32), seed=0)
    test_ds = generate_dataset(kind, 64, Grid2D(32), seed=1)
    spec = NetworkSpec()
    ck0, _ = pretrain_flow(
        train_ds, TrainConfig(phase="pretrain", epochs=8, seed=0), spec
    )
    ck1, _ = train_stage1(
        train_ds, TrainConfig(phase="stage1", epochs=4, seed=0), ck0
    )
    ck2, _ = train_stage2(
        train_ds,
        TrainConfig(phase="stage2", lr=3e-4, lr_lambda=2e4, epochs=4, seed=0),
        ck1,
    )
    return {
        "train": train_ds, "test": test_ds,
        "stage1": ck1, "stage2": ck2,
        "seconds": time.time() - tic,
    }


def test_criterion_9_desk_scale_trend(darcy_pipeline):
    p = darcy_pipeline
    res1 = list(eval_unconditional(p["stage1"], 64, nfe=2, seed=42).summary.values())[0]["mean"]
    res2 = list(eval_unconditional(p["stage2"], 64, nfe=2, seed=42).summary.values())[0]["mean"]
    h1_1 = eval_forward(p["stage1"], p["test"], [16], seed=7).summary[16]["mean"]
    h1_2 = eval_forward(p["stage2"], p["test"], [16], seed=7).summary[16]["mean"]
    total = p["seconds"]
    ok = res2 <= 0.5 * res1 and h1_2 <= h1_1 and total < 7200
    report(9, "Darcy 32x32: stage-2 residual@NFE2 <= 0.5 x stage-1; relH1@16 improves",
           ok, f"residual {res1:.3e} -> {res2:.3e}, relH1 {h1_1:.3e} -> {h1_2:.3e}, "
               f"training {total:.0f}s")


def test_criterion_10_mode_preservation(darcy_pipeline, tmp_path):
    p = darcy_pipeline
    model = p["stage2"].build_model()
    run = sample_unconditional(model, (2, 32, 32), make_schedule(2), seed=11, count=64)
    phys = p["stage2"].norm_stats.invert(run.states.numpy().astype(np.float64))
    hist = coeff_histogram(phys)

    # joint (unfrozen) ablation on a subset: must complete and emit a histogram
    sub = p["train"]
    small = type(sub)(sub.kind, sub.grid, sub.samples[:128], sub.norm_stats, sub.seed)
    ckj, _ = train_stage2(
        small,
        TrainConfig(phase="stage2_joint_ablation", lr=1e-4, epochs=1, seed=0),
        p["stage1"],
    )
    runj = sample_unconditional(ckj.build_model(), (2, 32, 32), make_schedule(2),
                                seed=11, count=64)
    physj = ckj.norm_stats.invert(runj.states.numpy().astype(np.float64))
    histj = coeff_histogram(physj)
    np.savetxt(tmp_path / "joint_hist.csv",
               np.column_stack([histj["edges"][:-1], histj["hist"]]), delimiter=",")
    ok = hist["mass_low"] >= 0.25 and hist["mass_high"] >= 0.25
    report(10, "stage-2 (frozen) keeps both coefficient modes >= 25% mass", ok,
           f"frozen low/high {hist['mass_low']:.2f}/{hist['mass_high']:.2f}, "
           f"joint low/high {histj['mass_low']:.2f}/{histj['mass_high']:.2f}")


# --- 11: wall-clock scaling ---------------------------------------------------


def test_criterion_11_walltime_scaling():
    tic = time.time()
    net = build_split_conv(SMALL_SPEC, seed=0)
    model = ConsistencyModel(net)
    t16 = benchmark_walltime(model, (2, 32, 32), 16, repeats=5)["median_seconds"]
    t64 = benchmark_walltime(model, (2, 32, 32), 64, repeats=5)["median_seconds"]
    ratio = t64 / t16
    elapsed = time.time() - tic
    ok = 2.5 <= ratio <= 5.5 and elapsed < 300
    report(11, "sampling time(N=64) / time(N=16) in [2.5, 5.5] at batch 1", ok,
           f"ratio {ratio:.2f} ({t16:.3f}s vs {t64:.3f}s), {elapsed:.0f}s")
