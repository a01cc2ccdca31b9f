"""Network builders: toy MLP, split-decoder conv net, and the adaptive weight head.

The split network shares one encoder and carries two architecturally identical
decoders. The coefficient branch is the original Stage-1 decoder; the solution
branch starts as an exact weight copy of it. During physics fine-tuning the
encoder and coefficient decoder are frozen and their values are checksummed so
bit-stability can be asserted.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

__all__ = [
    "NetworkSpec",
    "ToyMLP",
    "SplitDecoderNet",
    "WeightHead",
    "build_toy_mlp",
    "build_split_conv",
    "partition_forward",
    "freeze_backbone",
    "unfreeze_backbone",
    "backbone_checksum",
    "weight_head_eval",
]


@dataclass
class NetworkSpec:
    family: str = "split_conv"            # "toy_mlp" | "split_conv"
    widths: tuple = (32, 64, 128)          # encoder channel widths per level
    hidden: int = 128                      # toy MLP hidden units
    depth: int = 4                         # toy MLP hidden layers
    time_dim: int = 64
    channels: int = 2

    def __post_init__(self):
        if self.family not in ("toy_mlp", "split_conv"):
            raise ValueError(f"unknown network family {self.family!r}")
        if any(w <= 0 for w in self.widths) or self.hidden <= 0 or self.depth <= 0:
            raise ValueError("network dimensions must be positive")

    def to_dict(self):
        return {
            "family": self.family,
            "widths": list(self.widths),
            "hidden": self.hidden,
            "depth": self.depth,
            "time_dim": self.time_dim,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def fourier_time_features(t: torch.Tensor, dim: int, max_freq: float = 16.0) -> torch.Tensor:
    """Sinusoidal features of a scalar time, shape (..., dim).

    Frequencies span [1, max_freq] geometrically. The cap is deliberate: t
    only covers [0, pi/2], and moderate frequencies keep the map smooth enough
    for finite-difference tangents to agree with exact forward-mode ones.
    """
    half = dim // 2
    freqs = max_freq ** (
        torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    )
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ToyMLP(nn.Module):
    """Fully-connected velocity network for 2D toy manifolds."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.time_dim = spec.time_dim
        layers = [nn.Linear(2 + spec.time_dim, spec.hidden), nn.SiLU()]
        for _ in range(spec.depth - 1):
            layers += [nn.Linear(spec.hidden, spec.hidden), nn.SiLU()]
        layers.append(nn.Linear(spec.hidden, 2))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        feats = fourier_time_features(t, self.time_dim)
        return self.net(torch.cat([x, feats], dim=-1))


class ConvBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU, and a time-conditioned shift."""

    def __init__(self, cin, cout, time_dim):
        super().__init__()
        groups = min(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w1, w2, w3 = spec.widths
        td = spec.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(spec.channels, w1, 3, padding=1)
        self.block1 = ConvBlock(w1, w1, td)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = ConvBlock(w2, w2, td)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.block3 = ConvBlock(w3, w3, td)

    def forward(self, x, t):
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(fourier_time_features(t, self.time_mlp[0].in_features))
        h1 = self.block1(self.stem(x), emb)
        h2 = self.block2(self.down1(h1), emb)
        h3 = self.block3(self.down2(h2), emb)
        return (h1, h2, h3), emb


class Decoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w1, w2, w3 = spec.widths
        td = spec.time_dim
        self.up1 = nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1)
        self.block1 = ConvBlock(2 * w2, w2, td)
        self.up2 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.block2 = ConvBlock(2 * w1, w1, td)
        self.out = nn.Conv2d(w1, spec.channels, 3, padding=1)

    def forward(self, feats, emb):
        h1, h2, h3 = feats
        d = self.block1(torch.cat([self.up1(h3), h2], dim=1), emb)
        d = self.block2(torch.cat([self.up2(d), h1], dim=1), emb)
        return self.out(d)


class SplitDecoderNet(nn.Module):
    """Shared encoder with a frozen coefficient decoder and an active solution decoder.

    Each decoder emits the full [a, u] channel stack; `forward` concatenates
    the a-channel of the coefficient branch with the u-channel of the solution
    branch and never exposes the discarded channels.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.channels != 2:
            raise ValueError("split_conv expects exactly 2 channels [a, u]")
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder_a = Decoder(spec)
        self.decoder_u = copy.deepcopy(self.decoder_a)  # "copy decoder" init
        self.backbone_frozen = False

    def forward(self, x, t):
        if x.shape[-1] % 4 != 0 or x.shape[-2] % 4 != 0:
            raise ValueError(
                f"grid size {tuple(x.shape[-2:])} must be divisible by 4"
            )
        feats, emb = self.encoder(x, t)
        out_a = self.decoder_a(feats, emb)
        out_u = self.decoder_u(feats, emb)
        return torch.cat([out_a[:, :1], out_u[:, 1:]], dim=1)

    def branch_outputs(self, x, t):
        """Full per-branch outputs, for diagnostics and tests."""
        feats, emb = self.encoder(x, t)
        return self.decoder_a(feats, emb), self.decoder_u(feats, emb)

    def backbone_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder_a.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class WeightHead(nn.Module):
    """Time-conditioned scalar weight w(t); zero-initialized so e^w = 1 at start."""

    def __init__(self, time_dim: int = 32, hidden: int = 64):
        super().__init__()
        self.time_dim = time_dim
        self.fc1 = nn.Linear(time_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.fc1.weight.dtype)
        scalar = t.ndim == 0
        if scalar:
            t = t[None]
        feats = fourier_time_features(t, self.time_dim)
        w = self.fc2(nn.functional.silu(self.fc1(feats)))[..., 0]
        return w[0] if scalar else w


def build_toy_mlp(spec: NetworkSpec | None = None, seed: int | None = None) -> ToyMLP:
    spec = spec or NetworkSpec(family="toy_mlp")
    if seed is not None:
        torch.manual_seed(seed)
    return ToyMLP(spec)


def build_split_conv(
    spec: NetworkSpec | None = None, seed: int | None = None
) -> SplitDecoderNet:
    spec = spec or NetworkSpec(family="split_conv")
    if seed is not None:
        torch.manual_seed(seed)
    return SplitDecoderNet(spec)


def partition_forward(net: SplitDecoderNet, x: torch.Tensor, t) -> torch.Tensor:
    return net(x, t)


def backbone_checksum(net: SplitDecoderNet) -> str:
    """SHA-256 over the raw bytes of encoder + coefficient-decoder parameters."""
    digest = hashlib.sha256()
    for p in net.backbone_parameters():
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def freeze_backbone(net: SplitDecoderNet) -> str:
    """Mark encoder and coefficient decoder non-trainable; returns their checksum.

    Idempotent: freezing twice is a no-op.
    """
    for p in net.backbone_parameters():
        p.requires_grad_(False)
    net.backbone_frozen = True
    return backbone_checksum(net)


def unfreeze_backbone(net: SplitDecoderNet) -> None:
    """Joint-training ablation only; re-enables backbone gradients."""
    for p in net.backbone_parameters():
        p.requires_grad_(True)
    net.backbone_frozen = False


def weight_head_eval(head: WeightHead, t) -> torch.Tensor:
    return head(t)
