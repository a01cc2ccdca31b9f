import json
import os
from pathlib import Path

import numpy as np
import pytest

from scmpde.cli import dispatch
from scmpde.config import RunConfig, SCHEMA, echo_config, parse_config
from scmpde.datagen import load_dataset


# --- config ------------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg["stage2.lambda_init"] == (10.0, -10.0, -10.0)
    assert cfg["pretrain.lr"] == 1e-3
    assert cfg["pde"] == "darcy"


def test_config_parses_values_and_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "# experiment\n"
        "grid_n = 16\n"
        "stage2.lambda_init = 10,-10,-10  # loss masks\n"
        "net.widths = 8,16,32\n"
    )
    cfg = parse_config(p)
    assert cfg["grid_n"] == 16
    assert cfg["stage2.lambda_init"] == (10.0, -10.0, -10.0)
    assert cfg["net.widths"] == (8, 16, 32)


def test_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("stage2.lamda_init = 1,2,3\n")  # misspelled
    with pytest.raises(ValueError, match="lamda_init"):
        parse_config(p)


def test_config_rejects_type_mismatch(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("grid_n = thirty-two\n")
    with pytest.raises(ValueError, match="grid_n"):
        parse_config(p)


def test_config_rejects_schema_version_mismatch(tmp_path):
    p = tmp_path / "old.cfg"
    p.write_text("schema_version = 99\n")
    with pytest.raises(ValueError, match="schema version"):
        parse_config(p)


def test_config_missing_file():
    with pytest.raises(FileNotFoundError):
        parse_config("/nonexistent/run.cfg")


def test_config_echo_roundtrip(tmp_path):
    cfg = RunConfig({"grid_n": 16})
    echo = tmp_path / "echo.cfg"
    echo_config(cfg, echo)
    text = echo.read_text()
    assert "grid_n = 16" in text
    assert "# paper" in text and "# desk" in text
    # the echo itself parses back to the same resolved values
    cfg2 = parse_config(echo)
    assert cfg2.values == cfg.values


def test_train_config_mapping():
    cfg = RunConfig()
    tc = cfg.train_config("stage2")
    assert tc.phase == "stage2"
    assert tc.lr == 3e-4
    assert tc.lr_lambda == 20000.0
    assert tc.lambda_init == (10.0, -10.0, -10.0)
    assert cfg.train_config("pretrain").lr == 1e-3


def test_output_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SCMPDE_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    assert RunConfig().output_root() == tmp_path / "elsewhere"


# --- dispatch ----------------------------------------------------------------


def test_unknown_subcommand_exits_2(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch([]) == 2


def test_missing_required_flag_exits_2():
    assert dispatch(["gen-data", "--pde", "darcy"]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    rc = dispatch(["pretrain", "--data", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "c.pt")])
    assert rc == 1
    assert "error: pretrain" in capsys.readouterr().err


def test_gen_data_smoke(tmp_path):
    out = tmp_path / "d.bin"
    rc = dispatch(["gen-data", "--pde", "darcy", "--n", "32", "--count", "8",
                   "--seed", "1", "--out", str(out)])
    assert rc == 0
    assert out.exists() and Path(str(out) + ".meta.json").exists()
    ds = load_dataset(out)
    assert len(ds.samples) == 8 and ds.grid.n == 32
    # refuses to overwrite in place
    assert dispatch(["gen-data", "--pde", "darcy", "--n", "32", "--count", "1",
                     "--seed", "1", "--out", str(out)]) == 1
    assert len(load_dataset(out).samples) == 8


@pytest.fixture(scope="module")
def micro_pipeline(tmp_path_factory):
    """gen-data -> pretrain -> train1 -> train2 on a tiny dataset."""
    root = tmp_path_factory.mktemp("pipeline")
    os.environ["SCMPDE_OUTPUT_ROOT"] = str(root / "runs")
    cfgfile = root / "micro.cfg"
    cfgfile.write_text(
        "net.widths = 8,16,32\n"
        "net.time_dim = 16\n"
        "pretrain.epochs = 1\n"
        "stage1.epochs = 1\n"
        "stage2.epochs = 1\n"
        "pretrain.batch_size = 8\n"
        "stage1.batch_size = 8\n"
        "stage2.batch_size = 8\n"
    )
    data = root / "train.bin"
    assert dispatch(["gen-data", "--pde", "darcy", "--n", "32", "--count", "16",
                     "--seed", "0", "--out", str(data)]) == 0
    c0, c1, c2 = (root / f"ckpt{i}.pt" for i in range(3))
    assert dispatch(["pretrain", "--data", str(data), "--out", str(c0),
                     "--config", str(cfgfile)]) == 0
    assert dispatch(["train1", "--data", str(data), "--init", str(c0),
                     "--out", str(c1), "--config", str(cfgfile)]) == 0
    assert dispatch(["train2", "--data", str(data), "--init", str(c1),
                     "--out", str(c2), "--config", str(cfgfile)]) == 0
    yield {"root": root, "data": data, "cfg": cfgfile, "ckpts": (c0, c1, c2)}
    os.environ.pop("SCMPDE_OUTPUT_ROOT", None)


def test_pipeline_checkpoints_and_run_dirs(micro_pipeline):
    from scmpde.training import load_checkpoint

    c0, c1, c2 = micro_pipeline["ckpts"]
    assert load_checkpoint(c0).phase == "pretrain"
    assert load_checkpoint(c1).phase == "stage1"
    ck2 = load_checkpoint(c2)
    assert ck2.phase == "stage2" and ck2.frozen
    run_dirs = list((micro_pipeline["root"] / "runs").iterdir())
    assert len(run_dirs) >= 3
    for d in run_dirs:
        assert (d / "config_echo.txt").exists()
        info = json.loads((d / "run_info.json").read_text())
        assert "seed" in info and "version" in info
        if d.name.startswith(("pretrain", "train")):
            assert (d / "steps.csv").exists()


def test_pipeline_sample_and_solve(micro_pipeline, tmp_path):
    _, _, c2 = micro_pipeline["ckpts"]
    out = tmp_path / "samples"
    assert dispatch(["sample", "--ckpt", str(c2), "--steps", "2", "--count", "4",
                     "--seed", "0", "--out", str(out), "--render"]) == 0
    ds = load_dataset(out / "samples.bin")
    assert len(ds.samples) == 4
    assert (out / "samples.png").exists()

    fwd = tmp_path / "fwd"
    assert dispatch(["solve-forward", "--ckpt", str(c2), "--coeff",
                     str(micro_pipeline["data"]), "--steps", "1",
                     "--out", str(fwd)]) == 0
    sols = load_dataset(fwd / "solutions.bin")
    assert len(sols.samples) == 16
    # observed coefficient channel passes through (up to f32 storage)
    orig = load_dataset(micro_pipeline["data"])
    np.testing.assert_allclose(
        sols.stacked()[:, 0], orig.stacked()[:, 0], rtol=0, atol=1e-5
    )

    inv = tmp_path / "inv"
    assert dispatch(["invert", "--ckpt", str(c2), "--solution",
                     str(micro_pipeline["data"]), "--steps", "1",
                     "--out", str(inv)]) == 0
    assert (inv / "solutions.bin").exists()


def test_pipeline_eval_and_bench(micro_pipeline, capsys):
    _, _, c2 = micro_pipeline["ckpts"]
    assert dispatch(["eval", "--task", "uncond", "--ckpt", str(c2),
                     "--steps", "2", "--count", "2"]) == 0
    assert dispatch(["eval", "--task", "forward", "--ckpt", str(c2),
                     "--data", str(micro_pipeline["data"]), "--steps", "1"]) == 0
    assert dispatch(["eval", "--task", "forward", "--ckpt", str(c2),
                     "--steps", "1"]) == 1  # missing --data
    assert dispatch(["bench", "--ckpt", str(c2), "--steps", "1,2",
                     "--repeats", "1"]) == 0
    out = capsys.readouterr().out
    assert "NFE" in out
