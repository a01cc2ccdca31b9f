"""Flat key=value run configuration with a strict, versioned schema.

The file format is one `key = value` per line, `#` comments, blank lines
ignored. Every key must appear in the schema; unknown or misspelled keys are
rejected rather than silently ignored. Each schema entry is labelled with its
origin so the config echo can flag which defaults come from the reference
training recipe (`paper`) and which are desk-scale substitutions (`desk`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from scmpde.networks import NetworkSpec
from scmpde.training import TrainConfig

__all__ = ["SCHEMA", "RunConfig", "parse_config", "echo_config"]

SCHEMA_VERSION = 1


def _tuple_of(cast):
    def parse(s):
        parts = [p.strip() for p in str(s).split(",") if p.strip()]
        if not parts:
            raise ValueError("empty tuple")
        return tuple(cast(p) for p in parts)

    return parse


def _bool(s):
    if str(s).lower() in ("1", "true", "yes"):
        return True
    if str(s).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default, origin)
SCHEMA = {
    "schema_version": (int, SCHEMA_VERSION, "desk"),
    "pde": (str, "darcy", "paper"),
    "grid_n": (int, 32, "desk"),
    "seed": (int, 0, "desk"),
    "output_root": (str, "runs", "desk"),
    "data.count": (int, 2048, "desk"),
    "data.test_count": (int, 64, "desk"),
    "data.length_scale": (float, 0.1, "paper"),
    "net.widths": (_tuple_of(int), (32, 64, 128), "desk"),
    "net.time_dim": (int, 64, "desk"),
    "pretrain.lr": (float, 1e-3, "paper"),
    "pretrain.batch_size": (int, 16, "paper"),
    "pretrain.epochs": (int, 8, "desk"),
    "stage1.lr": (float, 1e-3, "paper"),
    "stage1.batch_size": (int, 16, "desk"),
    "stage1.epochs": (int, 4, "desk"),
    "stage2.lr": (float, 3e-4, "desk"),
    "stage2.lr_lambda": (float, 20000.0, "desk"),
    "stage2.batch_size": (int, 16, "desk"),
    "stage2.epochs": (int, 4, "desk"),
    "stage2.lambda_init": (_tuple_of(float), (10.0, -10.0, -10.0), "paper"),
    "stage2.boundary_weight": (float, 1.0, "desk"),
    "stage2.two_step_T": (float, 1.56, "paper"),
    "stage2.joint": (_bool, False, "paper"),
    "sample.steps": (int, 16, "paper"),
    "sample.count": (int, 16, "desk"),
    "sample.schedule": (str, "sigma_uniform", "paper"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default, _) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged
        if self.values["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"schema version mismatch: file says {self.values['schema_version']}, "
                f"this build expects {SCHEMA_VERSION}"
            )

    def __getitem__(self, key):
        return self.values[key]

    def net_spec(self) -> NetworkSpec:
        return NetworkSpec(
            widths=self["net.widths"], time_dim=self["net.time_dim"]
        )

    def train_config(self, phase: str, seed: int | None = None) -> TrainConfig:
        p = {"pretrain": "pretrain", "stage1": "stage1", "stage2": "stage2"}[
            "stage2" if phase.startswith("stage2") else phase
        ]
        kw = dict(
            phase=phase,
            lr=self[f"{p}.lr"],
            batch_size=self[f"{p}.batch_size"],
            epochs=self[f"{p}.epochs"],
            seed=self["seed"] if seed is None else seed,
        )
        if p == "stage2":
            kw.update(
                lr_lambda=self["stage2.lr_lambda"],
                lambda_init=self["stage2.lambda_init"],
                boundary_weight=self["stage2.boundary_weight"],
                two_step_T=self["stage2.two_step_T"],
            )
        return TrainConfig(**kw)

    def output_root(self) -> Path:
        # environment variable wins over config and defaults
        return Path(os.environ.get("SCMPDE_OUTPUT_ROOT", self["output_root"]))


def parse_config(path) -> RunConfig:
    """Parse a flat key=value file against the strict schema."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(
                f"{path}:{lineno}: bad value for {key!r}: {exc}"
            ) from exc
    return RunConfig(values)


def echo_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved config with per-key origin labels."""
    lines = []
    for key in SCHEMA:
        origin = SCHEMA[key][2]
        val = cfg[key]
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        lines.append(f"{key} = {val}  # {origin}")
    Path(path).write_text("\n".join(lines) + "\n")
