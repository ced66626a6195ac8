"""Residual U-Net variants for the coarse (3D) and fine (2.5D) stages.

The fine network never down-samples along z: every encoder stride is
``(1, 2, 2)``, so the slice count of the input is preserved at every level.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

Stride = Tuple[int, int, int]

# channel order of the lesion network output
LESION_CLASSES = ("kidney", "cyst", "tumor")


@dataclass
class NetworkSpec:
    in_channels: int = 1
    out_classes: int = 2
    base_channels: int = 32
    num_levels: int = 3
    downsample_strides: List[Stride] = field(default_factory=lambda: [(1, 2, 2)] * 3)
    norm_kind: str = "instance"
    activation_kind: str = "leaky_relu"
    blocks_per_level: int = 1

    def __post_init__(self) -> None:
        self.downsample_strides = [tuple(int(v) for v in s) for s in self.downsample_strides]

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_classes < 2 or self.base_channels < 1:
            raise ValueError(f"invalid channel configuration in {self}")
        if self.num_levels < 1 or len(self.downsample_strides) != self.num_levels:
            raise ValueError("downsample_strides must have one entry per level")
        for s in self.downsample_strides:
            if len(s) != 3 or any(v not in (1, 2) for v in s):
                raise ValueError(f"unsupported stride {s}")
        if self.norm_kind not in _NORMS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.activation_kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation_kind {self.activation_kind!r}")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")

    @property
    def divisor(self) -> Stride:
        """Required divisibility of the (z, y, x) input extent."""
        return tuple(math.prod(s[a] for s in self.downsample_strides) for a in range(3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downsample_strides"] = [list(s) for s in self.downsample_strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def coarse_spec(base_channels: int = 32, out_classes: int = 2) -> NetworkSpec:
    return NetworkSpec(out_classes=out_classes, base_channels=base_channels,
                       downsample_strides=[(2, 2, 2)] * 3)


def fine_spec(out_classes: int = 2, base_channels: int = 32) -> NetworkSpec:
    return NetworkSpec(out_classes=out_classes, base_channels=base_channels,
                       downsample_strides=[(1, 2, 2)] * 3)


_NORMS = {
    "instance": lambda c: nn.InstanceNorm3d(c, affine=True),
    "batch": lambda c: nn.BatchNorm3d(c),
    "group": lambda c: nn.GroupNorm(min(8, c), c),
}
_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.01, inplace=True),
    "relu": lambda: nn.ReLU(inplace=True),
}


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, spec: NetworkSpec, stride: Stride = (1, 1, 1)):
        super().__init__(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
            _NORMS[spec.norm_kind](cout),
            _ACTIVATIONS[spec.activation_kind](),
        )


class ResidualBlock(nn.Module):
    """Two 3x3x3 conv/norm layers with an identity or projected shortcut."""

    def __init__(self, cin: int, cout: int, spec: NetworkSpec, stride: Stride = (1, 1, 1)):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _NORMS[spec.norm_kind](cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = _NORMS[spec.norm_kind](cout)
        self.act = _ACTIVATIONS[spec.activation_kind]()
        if cin != cout or any(s != 1 for s in stride):
            self.shortcut = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride),
                _NORMS[spec.norm_kind](cout),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class EncoderStage(nn.Sequential):
    def __init__(self, cin, cout, spec: NetworkSpec, stride: Stride):
        blocks = [ResidualBlock(cin, cout, spec, stride)]
        blocks += [ResidualBlock(cout, cout, spec) for _ in range(spec.blocks_per_level - 1)]
        super().__init__(*blocks)


class DecoderStage(nn.Module):
    def __init__(self, cin, cskip, spec: NetworkSpec, stride: Stride):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cskip, kernel_size=stride, stride=stride)
        self.block = ResidualBlock(2 * cskip, cskip, spec)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class ResUNet(nn.Module):
    """Encoder/decoder with residual stages and skip concatenation.

    ``forward(x, return_features=True)`` additionally returns the encoder and
    decoder feature maps in execution order, which is what the shape tests
    inspect.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        widths = [spec.base_channels * 2 ** i for i in range(spec.num_levels + 1)]
        self.stem = ConvNormAct(spec.in_channels, widths[0], spec)
        self.encoder = nn.ModuleList(
            EncoderStage(widths[i], widths[i + 1], spec, spec.downsample_strides[i])
            for i in range(spec.num_levels)
        )
        self.decoder = nn.ModuleList(
            DecoderStage(widths[i + 1], widths[i], spec, spec.downsample_strides[i])
            for i in reversed(range(spec.num_levels))
        )
        self.head = nn.Conv3d(widths[0], spec.out_classes, 1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected a 5D (batch, channel, z, y, x) tensor, got shape {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        for axis, n, d in zip("zyx", x.shape[2:], self.spec.divisor):
            if n < 1 or n % d:
                raise ValueError(f"input extent {n} along {axis} is not divisible by {d}")

    def forward(self, x: torch.Tensor, return_features: bool = False):
        self.check_input(x)
        features = []
        h = self.stem(x)
        skips = [h]
        features.append(h)
        for stage in self.encoder:
            h = stage(h)
            skips.append(h)
            features.append(h)
        skips.pop()
        for stage in self.decoder:
            h = stage(h, skips.pop())
            features.append(h)
        logits = self.head(h)
        if return_features:
            return logits, features
        return logits


def init_he_normal(net: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=0.01, nonlinearity="leaky_relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_network(spec: NetworkSpec, seed: int | torch.Generator = 0) -> ResUNet:
    """Construct a He-normal initialised :class:`ResUNet` from ``spec``."""
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(int(seed))
    net = ResUNet(spec)
    init_he_normal(net, gen)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
