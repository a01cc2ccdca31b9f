"""Structure-preserving physics-informed consistency models for elliptic PDEs."""

from scmpde.grid import (
    Grid2D,
    GridField,
    JointState,
    PDEKind,
    normalized_residual_norm,
    relative_h1,
    relative_l2,
    residual,
)

__version__ = "0.1.0"
