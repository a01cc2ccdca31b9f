"""Dataset generation: GRF inputs, classical forward solves, and persistence.

Coefficient/source fields are drawn from a spectrally smoothed Gaussian random
field. Forward solutions come from a sparse finite-difference solve assembled
from exactly the same stencils as `scmpde.grid`, so the stored pairs zero the
discrete residual down to solver tolerance.

Dataset container format (little-endian):
  bytes 0..15   magic b"SCMPDEDS" + version u32 + 4 reserved bytes
  n (u32), channel count (u32), sample count (u64), dtype tag (u32, 1 = f32)
  then samples row-major in [a, u] channel order as float32.
A sidecar JSON file `<path>.meta.json` holds kind, seed, norm_stats, and the
generator version.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from scmpde.grid import (
    Grid2D,
    GridField,
    JointState,
    PDEKind,
    normalized_residual_norm,
)

__all__ = [
    "GRFSpec",
    "DarcyCoeffSpec",
    "NormStats",
    "Dataset",
    "sample_grf",
    "sample_darcy_coeff",
    "solve_forward",
    "generate_dataset",
    "normalize",
    "denormalize",
    "save_dataset",
    "load_dataset",
]

_MAGIC = b"SCMPDEDS"
_FORMAT_VERSION = 1
_GENERATOR_VERSION = "scmpde-0.1.0"


@dataclass(frozen=True)
class GRFSpec:
    """Gaussian random field with spectral Gaussian smoothing."""

    length_scale: float = 0.1
    variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.length_scale <= 0 or self.variance <= 0:
            raise ValueError("length_scale and variance must be positive")


@dataclass(frozen=True)
class DarcyCoeffSpec:
    """Binarized-GRF permeability levels for the Darcy coefficient."""

    low: float = 3.0
    high: float = 12.0
    threshold: float = 0.5

    def __post_init__(self):
        if not (0 < self.low < self.high):
            raise ValueError("need 0 < low < high")
        if not (0 < self.threshold < 1):
            raise ValueError("threshold must be in (0, 1)")


@dataclass
class NormStats:
    """Per-channel affine normalization statistics in [a, u] order."""

    mean: np.ndarray  # shape (2,)
    std: np.ndarray   # shape (2,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError("norm stats must be finite")
        if np.any(self.std <= 0):
            raise ValueError("norm stats std must be positive")

    def apply(self, x):
        """Normalize a channel-first array (..., 2, n, n); numpy or torch."""
        m, s = self._like(x)
        return (x - m) / s

    def invert(self, x):
        m, s = self._like(x)
        return x * s + m

    def _like(self, x):
        if isinstance(x, np.ndarray):
            return self.mean.reshape(2, 1, 1), self.std.reshape(2, 1, 1)
        import torch

        m = torch.as_tensor(self.mean, dtype=x.dtype, device=x.device).view(2, 1, 1)
        s = torch.as_tensor(self.std, dtype=x.dtype, device=x.device).view(2, 1, 1)
        return m, s

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass
class Dataset:
    kind: PDEKind
    grid: Grid2D
    samples: list  # list[JointState]
    norm_stats: NormStats
    seed: int = 0

    def stacked(self) -> np.ndarray:
        """All samples as one array of shape (count, 2, n, n)."""
        return np.stack([s.stack() for s in self.samples])


def sample_grf(spec: GRFSpec, grid: Grid2D, rng=None) -> GridField:
    """Draw a smoothed Gaussian random field, standardized per draw."""
    if spec.length_scale >= 1.0:
        raise ValueError("length_scale must be below the domain size 1")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = grid.n
    white = rng.standard_normal((n, n))
    kx = np.fft.fftfreq(n, d=grid.h) * 2 * np.pi
    ky = np.fft.fftfreq(n, d=grid.h) * 2 * np.pi
    k2 = kx[:, None] ** 2 + ky[None, :] ** 2
    kernel = np.exp(-0.5 * k2 * spec.length_scale**2)
    smooth = np.fft.ifft2(np.fft.fft2(white) * kernel).real
    smooth -= smooth.mean()
    smooth /= smooth.std()
    return GridField(grid, smooth * np.sqrt(spec.variance))


def sample_darcy_coeff(
    spec: DarcyCoeffSpec, grf: GRFSpec, grid: Grid2D, rng=None
) -> GridField:
    """Binarize a GRF draw at its empirical quantile into {low, high}."""
    base = sample_grf(grf, grid, rng=rng)
    cut = np.quantile(base.values, spec.threshold)
    vals = np.where(base.values <= cut, spec.low, spec.high)
    return GridField(grid, vals)


def _interior_operator(kind: PDEKind, a: GridField) -> sp.csr_matrix:
    """Sparse SPD operator on interior nodes matching the residual stencils.

    Returns A such that A u_int equals the *negated* residual's linear part,
    i.e. -lap u (Poisson), -(lap + k^2) u (Helmholtz), -div(a grad u) (Darcy).
    """
    n = a.grid.n
    m = n - 2
    h2 = a.grid.h**2
    if kind.name in ("poisson", "helmholtz"):
        T = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m))
        I = sp.identity(m)
        A = (sp.kron(I, T) + sp.kron(T, I)) / h2
        if kind.name == "helmholtz":
            A = A - kind.k**2 * sp.identity(m * m)
        return A.tocsr()
    # Darcy: face coefficients, arithmetic averages; 5-point pattern
    av = a.values
    A = sp.lil_matrix((m * m, m * m))
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            idx = (i - 1) * m + (j - 1)
            ax_p = 0.5 * (av[i, j] + av[i + 1, j])
            ax_m = 0.5 * (av[i, j] + av[i - 1, j])
            ay_p = 0.5 * (av[i, j] + av[i, j + 1])
            ay_m = 0.5 * (av[i, j] + av[i, j - 1])
            A[idx, idx] = (ax_p + ax_m + ay_p + ay_m) / h2
            if i + 1 < n - 1:
                A[idx, idx + m] = -ax_p / h2
            if i - 1 > 0:
                A[idx, idx - m] = -ax_m / h2
            if j + 1 < n - 1:
                A[idx, idx + 1] = -ay_p / h2
            if j - 1 > 0:
                A[idx, idx - 1] = -ay_m / h2
    return A.tocsr()


def solve_forward(
    kind: PDEKind, a: GridField, tol: float = 1e-8, method: str = "direct"
) -> GridField:
    """Solve the discrete forward problem with u = 0 on the boundary.

    The system is assembled from the same stencils as the residual operators,
    so the returned field zeroes the discrete residual to `tol`.
    """
    if kind.name == "darcy" and np.any(a.values <= 0):
        raise ValueError("Darcy coefficient must be positive everywhere")
    n = a.grid.n
    m = n - 2
    A = _interior_operator(kind, a)
    if kind.name == "darcy":
        rhs = np.ones(m * m)
    else:
        # lap u (+ k^2 u) = a  ->  negated SPD form has rhs -a
        rhs = -a.values[1:-1, 1:-1].ravel()
    if method == "direct":
        u_int = spla.spsolve(A, rhs)
    elif method == "cg":
        u_int, info = spla.cg(A, rhs, rtol=1e-14, atol=0.0, maxiter=20 * m * m)
        if info != 0:
            raise RuntimeError(f"CG failed to converge (info={info})")
    else:
        raise ValueError(f"unknown solver method {method!r}")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = u_int.reshape(m, m)
    uf = GridField(a.grid, u)
    res = normalized_residual_norm(kind, JointState(a, uf))
    if res > tol:
        raise RuntimeError(
            f"forward solve residual {res:.3e} exceeds tolerance {tol:.1e}"
        )
    return uf


def generate_dataset(
    kind: PDEKind,
    count: int,
    grid: Grid2D,
    seed: int = 0,
    grf: GRFSpec | None = None,
    darcy: DarcyCoeffSpec | None = None,
    tol: float = 1e-8,
) -> Dataset:
    """Draw coefficients, solve forward, and collect normalization stats.

    Per-sample RNG streams are keyed by (seed, index) so parallel and serial
    generation would produce identical datasets.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    grf = grf or GRFSpec()
    darcy = darcy or DarcyCoeffSpec()
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        try:
            if kind.name == "darcy":
                a = sample_darcy_coeff(darcy, grf, grid, rng=rng)
            else:
                a = sample_grf(grf, grid, rng=rng)
            u = solve_forward(kind, a, tol=tol)
        except Exception as exc:
            raise RuntimeError(f"sample {i} failed: {exc}") from exc
        samples.append(JointState(a, u))
    stacked = np.stack([s.stack() for s in samples])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return Dataset(kind, grid, samples, NormStats(mean, std), seed=seed)


def normalize(state: JointState, stats: NormStats) -> JointState:
    return JointState.from_stack(state.grid, stats.apply(state.stack()))


def denormalize(state: JointState, stats: NormStats) -> JointState:
    return JointState.from_stack(state.grid, stats.invert(state.stack()))


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    data = ds.stacked().astype("<f4")
    header = _MAGIC + struct.pack("<I", _FORMAT_VERSION) + b"\x00" * 4
    header += struct.pack("<IIQI", ds.grid.n, 2, len(ds.samples), 1)
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())
    meta = {
        "kind": ds.kind.name,
        "k": ds.kind.k,
        "seed": ds.seed,
        "norm_stats": ds.norm_stats.to_dict(),
        "generator_version": _GENERATOR_VERSION,
    }
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a scmpde dataset file (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    n, channels, count, dtype_tag = struct.unpack("<IIQI", raw[16:36])
    if channels != 2 or dtype_tag != 1:
        raise ValueError("corrupted dataset header")
    expected = 36 + count * channels * n * n * 4
    if len(raw) != expected:
        raise ValueError(f"dataset payload size mismatch ({len(raw)} vs {expected})")
    data = np.frombuffer(raw[36:], dtype="<f4").reshape(count, 2, n, n).astype(np.float64)
    with open(str(path) + ".meta.json") as f:
        meta = json.load(f)
    kind = PDEKind(meta["kind"], k=meta.get("k", 1.0))
    grid = Grid2D(n)
    samples = [JointState.from_stack(grid, x) for x in data]
    return Dataset(
        kind, grid, samples, NormStats.from_dict(meta["norm_stats"]), seed=meta["seed"]
    )
