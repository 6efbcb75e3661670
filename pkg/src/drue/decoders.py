"""Decoder pair mirroring the encoder.

``G1`` reconstructs the image from the penultimate features. ``G0`` first maps
the final features back into the penultimate feature space with a head block
and then reuses ``G1`` unchanged, so the two decoders hold one copy of the
shared parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ContractViolation
from .backbone import ACTIVATIONS, EncoderConfig, group_norm


@dataclass(frozen=True)
class StageSpec:
    c_in: int
    c_out: int
    upsample: bool


@dataclass(frozen=True)
class DecoderConfig:
    head: StageSpec
    tail: tuple[StageSpec, ...]
    output: StageSpec
    m1_shape: tuple[int, int, int]
    m0_shape: tuple[int, int, int]
    image_size: int
    activation: str

    def tail_channels(self) -> list[int]:
        return [s.c_in for s in self.tail] + [self.output.c_in, self.output.c_out]


def mirror_architecture(cfg: EncoderConfig, activation: str | None = None) -> DecoderConfig:
    """Reverse the encoder stage by stage; each downsample becomes a 2x upsample."""
    widths = [cfg.stem_channels, *cfg.channels]
    mirrored = [StageSpec(widths[i + 1], widths[i], cfg.downsample[i]) for i in range(cfg.num_blocks)]
    m1_shape, m0_shape = cfg.feature_shapes()
    return DecoderConfig(
        head=mirrored[-1],
        tail=tuple(reversed(mirrored[:-1])),
        output=StageSpec(cfg.stem_channels, 3, cfg.stem_stride == 2),
        m1_shape=m1_shape,
        m0_shape=m0_shape,
        image_size=cfg.image_size,
        activation=activation or cfg.activation,
    )


class DecoderStage(nn.Module):
    """Nearest-neighbour upsample (optional) followed by a residual block."""

    def __init__(self, spec: StageSpec, activation: str = "relu"):
        super().__init__()
        self.upsample = spec.upsample
        self.conv1 = nn.Conv2d(spec.c_in, spec.c_out, 3, padding=1, bias=False)
        self.norm1 = group_norm(spec.c_out)
        self.conv2 = nn.Conv2d(spec.c_out, spec.c_out, 3, padding=1, bias=False)
        self.norm2 = group_norm(spec.c_out)
        self.act = ACTIVATIONS[activation]()
        if spec.c_in != spec.c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(spec.c_in, spec.c_out, 1, bias=False), group_norm(spec.c_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.shortcut(x))


class OutputStage(nn.Module):
    def __init__(self, spec: StageSpec):
        super().__init__()
        self.upsample = spec.upsample
        self.conv = nn.Conv2d(spec.c_in, spec.c_out, 3, padding=1)

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.conv(x))


class DecoderPair(nn.Module):
    """``g1(m1) = tail(m1)`` and ``g0(m0) = tail(head(m0))`` over one shared tail."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.head = DecoderStage(config.head, config.activation)
        self.tail = nn.Sequential(
            *[DecoderStage(s, config.activation) for s in config.tail],
            OutputStage(config.output),
        )

    @classmethod
    def from_encoder(cls, cfg: EncoderConfig, activation: str | None = None) -> "DecoderPair":
        return cls(mirror_architecture(cfg, activation))

    def shared_manifest(self) -> list[str]:
        return [f"tail.{name}" for name, _ in self.tail.named_parameters()]

    def head_manifest(self) -> list[str]:
        return [f"head.{name}" for name, _ in self.head.named_parameters()]

    def _check(self, m: torch.Tensor, expected: tuple[int, int, int], which: str):
        if m.ndim != 4 or tuple(m.shape[1:]) != expected:
            raise ContractViolation(f"{which} must have shape (n, {', '.join(map(str, expected))}), got {tuple(m.shape)}")

    def g1(self, m1: torch.Tensor) -> torch.Tensor:
        self._check(m1, self.config.m1_shape, "m1")
        return self.tail(m1)

    def g0(self, m0: torch.Tensor) -> torch.Tensor:
        self._check(m0, self.config.m0_shape, "m0")
        return self.tail(self.head(m0))

    def map_to_penultimate(self, m0: torch.Tensor) -> torch.Tensor:
        self._check(m0, self.config.m0_shape, "m0")
        return self.head(m0)


@torch.no_grad()
def reconstruct_from_penultimate(m1: torch.Tensor, pair: DecoderPair) -> torch.Tensor:
    pair.eval()
    return pair.g1(m1)


@torch.no_grad()
def reconstruct_from_final(m0: torch.Tensor, pair: DecoderPair) -> torch.Tensor:
    pair.eval()
    return pair.g0(m0)
