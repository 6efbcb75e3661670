"""Numerical checks that the reconstruction difference is a Jacobian-vector product.

Writing ``z`` for the penultimate features and ``dz = head(final_block(z)) - z``,
the G0 reconstruction is ``G1(z + dz)``. To first order the DRUE difference
is ``J_G1(z) @ dz`` and the remainder shrinks quadratically with the size of
``dz``. Everything here runs in float64.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch.func import jvp as _forward_jvp

from ._validation import ConfigurationError, check_images, to_tensor
from .backbone import EncoderConfig
from .decoders import DecoderPair
from .training import CheckpointBundle, TrainConfig, train_g0, train_g1

logger = logging.getLogger(__name__)

EPS = 1e-12
_UNDERFLOW_FACTOR = 1e3 * np.finfo(np.float64).eps


class NumericalError(RuntimeError):
    pass


@dataclass
class PerturbationProbe:
    z: torch.Tensor
    dz: torch.Tensor
    scales: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3])

    def __post_init__(self):
        self.z = torch.as_tensor(self.z, dtype=torch.float64)
        self.dz = torch.as_tensor(self.dz, dtype=torch.float64)
        self.scales = [float(s) for s in self.scales]
        if self.z.shape != self.dz.shape:
            raise ConfigurationError(f"z {tuple(self.z.shape)} and dz {tuple(self.dz.shape)} differ in shape")
        if not torch.any(self.dz != 0):
            raise ConfigurationError("dz must be nonzero")
        if any(s <= 0 for s in self.scales):
            raise ConfigurationError("scales must be positive")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigurationError("scales must be strictly decreasing")


@dataclass
class JVPResult:
    tangent: torch.Tensor
    method: str
    step: float | None = None


@dataclass
class ScalingResult:
    scales: list[float]
    remainders: list[float]
    residuals: list[float]
    slope: float | None
    exact: bool
    dropped: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scales": self.scales,
            "remainders": self.remainders,
            "residuals": self.residuals,
            "slope": self.slope,
            "exact": self.exact,
            "dropped_scales": self.dropped,
        }


def as_float64(decoder) -> Callable[[torch.Tensor], torch.Tensor]:
    """Float64 callable for G1: a DecoderPair is copied and cast, callables pass through."""
    if isinstance(decoder, DecoderPair):
        pair = copy.deepcopy(decoder).double().eval()
        pair.requires_grad_(False)
        return pair.tail
    return decoder


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.all(torch.isfinite(t)):
        raise NumericalError(f"non-finite values in {what}")
    return t


def jvp_g1(z, dz, decoder, method: str = "forward") -> JVPResult:
    """Directional derivative of G1 at ``z`` along ``dz``.

    ``method="forward"`` uses forward-mode autodiff; ``"central"`` uses a
    central difference with step ``1e-4 * |z| / |dz|``.
    """
    g = as_float64(decoder)
    z = torch.as_tensor(z, dtype=torch.float64)
    dz = torch.as_tensor(dz, dtype=torch.float64)
    if z.shape != dz.shape:
        raise ConfigurationError("z and dz must have the same shape")
    if method == "forward":
        _, tangent = _forward_jvp(g, (z,), (dz,))
        return JVPResult(_finite(tangent, "jvp"), "forward-mode")
    if method == "central":
        dz_norm = torch.linalg.vector_norm(dz).item()
        if dz_norm == 0:
            return JVPResult(torch.zeros_like(g(z)), "central-difference", 0.0)
        h = 1e-4 * max(torch.linalg.vector_norm(z).item(), 1.0) / dz_norm
        tangent = (g(z + h * dz) - g(z - h * dz)) / (2 * h)
        return JVPResult(_finite(tangent, "jvp"), "central-difference", h)
    raise ConfigurationError(f"unknown jvp method {method!r}")


def _remainder_terms(z, dz, scale, g, tangent):
    base = _finite(g(z), "G1(z)")
    moved = _finite(g(z + scale * dz), "G1(z + s dz)")
    diff = moved - base
    rem = (diff - scale * tangent).abs().sum().item()
    return rem, diff.abs().sum().item(), base.abs().sum().item() + moved.abs().sum().item()


def taylor_residual(z, dz, scale: float, decoder) -> float:
    """|G1(z+s dz) - G1(z) - s J dz|_1 / max(|G1(z+s dz) - G1(z)|_1, 1e-12)."""
    if scale <= 0:
        raise ConfigurationError("scale must be > 0")
    g = as_float64(decoder)
    z = torch.as_tensor(z, dtype=torch.float64)
    dz = torch.as_tensor(dz, dtype=torch.float64)
    tangent = jvp_g1(z, dz, g).tangent
    rem, diff, _ = _remainder_terms(z, dz, scale, g, tangent)
    return rem / max(diff, EPS)


def residual_scaling_exponent(probe: PerturbationProbe, decoder) -> ScalingResult:
    """Least-squares slope of log remainder against log scale (about 2 for smooth G1).

    Remainders at the round-off floor are dropped with a warning; if every
    remainder is at the floor the map is reported as exact (affine).
    """
    scales = probe.scales
    if len(scales) < 3 or scales[0] / scales[-1] < 100 * (1 - 1e-9):
        raise ConfigurationError("need >= 3 scales spanning at least two decades")
    g = as_float64(decoder)
    tangent = jvp_g1(probe.z, probe.dz, g).tangent
    remainders, residuals, keep, dropped = [], [], [], []
    for s in scales:
        rem, diff, magnitude = _remainder_terms(probe.z, probe.dz, s, g, tangent)
        remainders.append(rem)
        residuals.append(rem / max(diff, EPS))
        if rem <= _UNDERFLOW_FACTOR * max(magnitude, EPS):
            dropped.append(s)
        else:
            keep.append((s, rem))
    if len(keep) == 0:
        return ScalingResult(scales, remainders, residuals, None, True, dropped)
    if dropped:
        warnings.warn(f"remainder at round-off level for scales {dropped}; dropped from the fit", stacklevel=2)
    if len(keep) < 3:
        raise NumericalError(f"only {len(keep)} scales above round-off; need 3 to fit a slope")
    x = np.log([s for s, _ in keep])
    y = np.log([r for _, r in keep])
    slope = float(np.polyfit(x, y, 1)[0])
    return ScalingResult(scales, remainders, residuals, slope, False, dropped)


@dataclass
class GapRecord:
    scale: float
    drue: float
    jvp_estimate: float
    relative_gap: float
    relative_remainder: float = 0.0


@torch.no_grad()
def _feature_offset(X, bundle: CheckpointBundle):
    bundle.require("g1", "g0")
    X = check_images(X, image_size=bundle.model.config.image_size)
    model = copy.deepcopy(bundle.model).double().eval()
    pair = copy.deepcopy(bundle.decoder).double().eval()
    m1, m0 = model.forward_features(to_tensor(X).double())
    return m1, pair.head(m0) - m1, pair


def drue_vs_jvp_check(X, bundle: CheckpointBundle, scales=(1.0,)) -> list[GapRecord]:
    """Compare the reconstruction difference with its first-order estimate.

    For each scale ``s``, ``drue`` is ``mean|G1(z + s dz) - G1(z)|`` (the DRUE
    score at ``s = 1``) and ``jvp_estimate`` is ``mean|s J dz|``.
    ``relative_gap`` is ``|drue - jvp_estimate| / drue``; ``relative_remainder``
    is the elementwise ``mean|G1(z + s dz) - G1(z) - s J dz| / drue``, which
    bounds it from above.
    """
    z, dz, pair = _feature_offset(X, bundle)
    g = pair.tail
    base = g(z)
    if not torch.any(dz != 0):
        return [GapRecord(float(s), 0.0, 0.0, 0.0, 0.0) for s in scales]
    with torch.enable_grad():
        tangent = _finite(_forward_jvp(g, (z,), (dz,))[1].detach(), "jvp")
    out = []
    for s in scales:
        with torch.no_grad():
            diff = g(z + s * dz) - base
        true = diff.abs().mean().item()
        est = (s * tangent).abs().mean().item()
        rem = (diff - s * tangent).abs().mean().item()
        out.append(GapRecord(float(s), true, est, abs(true - est) / max(true, EPS), rem / max(true, EPS)))
    return out


def gap_is_monotone(records: list[GapRecord], field: str = "relative_gap") -> bool:
    """True if ``field`` never increases as the scale decreases."""
    ordered = sorted(records, key=lambda r: -r.scale)
    return all(getattr(b, field) <= getattr(a, field) for a, b in zip(ordered, ordered[1:]))


def probe_from_bundle(X, bundle: CheckpointBundle, scales=(1e-1, 1e-2, 1e-3)) -> PerturbationProbe:
    """Probe at the real penultimate features along the real feature offset."""
    z, dz, _ = _feature_offset(X, bundle)
    return PerturbationProbe(z, dz, list(scales))


def smooth_decoder(bundle_or_config, seed: int = 0, activation: str = "silu") -> DecoderPair:
    """A decoder pair with smooth activations, for remainder-slope checks."""
    cfg = bundle_or_config.model.config if isinstance(bundle_or_config, CheckpointBundle) else bundle_or_config
    if not isinstance(cfg, EncoderConfig):
        raise ConfigurationError("expected a CheckpointBundle or EncoderConfig")
    torch.manual_seed(seed)
    return DecoderPair.from_encoder(cfg, activation).double().eval()



def train_smooth_pair(bundle: CheckpointBundle, split, cfg: TrainConfig, activation: str = "silu") -> CheckpointBundle:
    """Retrain G1 and the frozen-tail G0 on ``bundle``'s classifier with a smooth activation."""
    bundle.require("classifier")
    base = CheckpointBundle(model=bundle.model, stages=["classifier"])
    b = train_g1(base, split, dataclasses.replace(cfg, stage="g1"), activation=activation)
    return train_g0(b, split, dataclasses.replace(cfg, stage="g0"), freeze=True)
