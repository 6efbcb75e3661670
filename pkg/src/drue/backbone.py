"""Residual classifier whose feature extractor exposes its last two stages.

The extractor is a stem followed by ``num_blocks`` residual stages. Features
are tapped after the penultimate stage (``m1``) and after the final stage
(``m0``); the classification head pools ``m0`` globally and applies a linear
layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigurationError, ContractViolation

ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "softplus": nn.Softplus}


@dataclass
class EncoderConfig:
    num_blocks: int = 4
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    downsample: list[bool] = field(default_factory=lambda: [False, True, True, True])
    stem_channels: int = 16
    stem_stride: int = 2
    image_size: int = 64
    dropout_rate: float = 0.0
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.downsample = [bool(d) for d in self.downsample]
        if self.num_blocks < 2:
            raise ConfigurationError("num_blocks must be >= 2 to tap two depths")
        if not len(self.channels) == len(self.downsample) == self.num_blocks:
            raise ConfigurationError("channels and downsample must both have num_blocks entries")
        if self.stem_stride not in (1, 2):
            raise ConfigurationError("stem_stride must be 1 or 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        side = self.image_size
        if side % self.stem_stride:
            raise ConfigurationError("image_size not divisible by the stem stride")
        side //= self.stem_stride
        for d in self.downsample:
            if d:
                if side % 2:
                    raise ConfigurationError("odd spatial size at a downsampling stage")
                side //= 2
        if side < 2:
            raise ConfigurationError(f"final feature map would be {side}x{side}; need at least 2x2")

    def feature_shapes(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """(C, H, W) of the penultimate and final stage outputs."""
        side = self.image_size // self.stem_stride
        sides = []
        for d in self.downsample:
            side = side // 2 if d else side
            sides.append(side)
        return (
            (self.channels[-2], sides[-2], sides[-2]),
            (self.channels[-1], sides[-1], sides[-1]),
        )

    def arch_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeaturePair(NamedTuple):
    m1: torch.Tensor
    m0: torch.Tensor


def group_norm(channels: int) -> nn.GroupNorm:
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResidualStage(nn.Module):
    """Basic residual block; the first convolution strides by 2 when downsampling."""

    def __init__(self, c_in: int, c_out: int, downsample: bool, activation: str = "relu"):
        super().__init__()
        stride = 2 if downsample else 1
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.norm2 = group_norm(c_out)
        self.act = ACTIVATIONS[activation]()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), group_norm(c_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Feature extractor (stem + stages) and a pooled linear head."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        self.stem = nn.Sequential(
            nn.Conv2d(3, config.stem_channels, 3, stride=config.stem_stride, padding=1, bias=False),
            group_norm(config.stem_channels),
            ACTIVATIONS[config.activation](),
        )
        c_prev = config.stem_channels
        stages = []
        for c, d in zip(config.channels, config.downsample):
            stages.append(ResidualStage(c_prev, c, d, config.activation))
            c_prev = c
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(c_prev, config.num_classes)

    def _check_input(self, x: torch.Tensor):
        s = self.config.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ContractViolation(f"expected input of shape (n, 3, {s}, {s}), got {tuple(x.shape)}")

    def _dropout(self, h, rate, generator):
        if rate <= 0:
            return h
        keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= rate
        return h * keep / (1.0 - rate)

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        """Output of the first ``num_blocks - 1`` stages."""
        self._check_input(x)
        h = self.stem(x)
        for stage in self.stages[:-1]:
            h = stage(h)
        return h

    def final_block(self, m1: torch.Tensor) -> torch.Tensor:
        return self.stages[-1](m1)

    def forward_features(self, x: torch.Tensor) -> FeaturePair:
        m1 = self.penultimate(x)
        return FeaturePair(m1, self.final_block(m1))

    def logits_from_features(self, m0: torch.Tensor) -> torch.Tensor:
        return self.head(m0.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        h = self.stem(x)
        rate = self.config.dropout_rate if self.training else 0.0
        for stage in self.stages:
            h = stage(h)
            if rate > 0:
                h = F.dropout(h, rate, training=True)
        return self.logits_from_features(h)

    def stochastic_logits(self, x: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
        """Logits with dropout masks applied after every stage output."""
        self._check_input(x)
        h = self.stem(x)
        for stage in self.stages:
            h = self._dropout(stage(h), rate, generator)
        return self.logits_from_features(h)


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@torch.no_grad()
def forward_features(model: ResidualClassifier, x: torch.Tensor) -> FeaturePair:
    was_training = model.training
    model.eval()
    try:
        return model.forward_features(x)
    finally:
        model.train(was_training)


@torch.no_grad()
def predict(model: ResidualClassifier, x: torch.Tensor) -> np.ndarray:
    """Class probabilities (n, num_classes) in inference mode."""
    was_training = model.training
    model.eval()
    try:
        return softmax(model(x).double().numpy())
    finally:
        model.train(was_training)


@torch.no_grad()
def predict_mc(
    model: ResidualClassifier, x: torch.Tensor, n_passes: int, dropout_rate: float, seed: int = 0
) -> np.ndarray:
    """``n_passes`` stochastic forward passes; returns (n_passes, n, num_classes)."""
    if n_passes < 1:
        raise ConfigurationError("n_passes must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError("dropout_rate must lie in [0, 1)")
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    try:
        return np.stack(
            [softmax(model.stochastic_logits(x, dropout_rate, gen).double().numpy()) for _ in range(n_passes)]
        )
    finally:
        model.train(was_training)
