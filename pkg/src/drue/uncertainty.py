"""Uncertainty scorers. Every score is "higher = more uncertain".

All reconstruction scores use the mean absolute error over pixels and
channels, so they are comparable across image resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ._validation import ConfigurationError, check_images, check_probabilities, to_images, to_tensor
from .backbone import predict, predict_mc
from .training import CheckpointBundle

METHODS = ("drue", "rue", "entropy", "mc_dropout")
_REQUIRED = {"drue": ("g1", "g0"), "rue": ("g0",), "entropy": ("classifier",), "mc_dropout": ("classifier",)}


@dataclass(frozen=True)
class UncertaintyMethod:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigurationError(f"unknown method {self.name!r}; expected one of {METHODS}")

    def required_stages(self) -> tuple[str, ...]:
        if self.name == "rue" and self.params.get("tap", "final") == "penultimate":
            return ("g1",)
        return _REQUIRED[self.name]

    def __call__(self, X, bundle: CheckpointBundle) -> np.ndarray:
        fn = {"drue": drue_score, "rue": rue_score, "entropy": bundle_entropy_score, "mc_dropout": mc_dropout_score}
        return fn[self.name](X, bundle, **self.params)


def mean_abs_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample mean |a - b| over every axis but the first."""
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return diff.reshape(len(diff), -1).mean(axis=1)


def _require_decoder(bundle: CheckpointBundle, *stages: str) -> None:
    bundle.require(*stages)
    if bundle.decoder is None:
        raise ConfigurationError("bundle has no decoder parameters")


@torch.no_grad()
def reconstructions(X, bundle: CheckpointBundle, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Return (x_hat from the penultimate tap via G1, x_hat' from the final tap via G0)."""
    X = check_images(X, image_size=bundle.model.config.image_size)
    model, pair = bundle.model.eval(), bundle.decoder.eval()
    hats, hats0 = [], []
    for start in range(0, len(X), batch_size):
        m1, m0 = model.forward_features(to_tensor(X[start : start + batch_size]))
        hats.append(to_images(pair.g1(m1)))
        hats0.append(to_images(pair.g0(m0)))
    return np.concatenate(hats), np.concatenate(hats0)


def drue_score(X, bundle: CheckpointBundle, batch_size: int = 64) -> np.ndarray:
    """Mean absolute difference between the two reconstructions, one value per image."""
    _require_decoder(bundle, "g1", "g0")
    x_hat, x_hat0 = reconstructions(X, bundle, batch_size)
    return mean_abs_gap(x_hat, x_hat0)


def rue_score(X, bundle: CheckpointBundle, tap: str = "final", batch_size: int = 64) -> np.ndarray:
    """Mean absolute input-vs-reconstruction error.

    ``tap="final"`` reconstructs through G0 from the last stage,
    ``tap="penultimate"`` through G1 from the stage before it.
    """
    if tap not in ("final", "penultimate"):
        raise ConfigurationError(f"tap must be 'final' or 'penultimate', got {tap!r}")
    _require_decoder(bundle, "g0" if tap == "final" else "g1")
    X = check_images(X, image_size=bundle.model.config.image_size)
    model, pair = bundle.model.eval(), bundle.decoder.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            chunk = X[start : start + batch_size]
            m1, m0 = model.forward_features(to_tensor(chunk))
            rec = pair.g0(m0) if tap == "final" else pair.g1(m1)
            scores.append(mean_abs_gap(to_images(rec), chunk))
    return np.concatenate(scores)


def entropy_score(probs) -> np.ndarray:
    """Shannon entropy in nats of each probability row, with 0 ln 0 = 0."""
    p = check_probabilities(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=1)


def bundle_entropy_score(X, bundle: CheckpointBundle) -> np.ndarray:
    bundle.require("classifier")
    X = check_images(X, image_size=bundle.model.config.image_size)
    return entropy_score(predict(bundle.model, to_tensor(X)))


def mc_dropout_score(
    X, bundle: CheckpointBundle, n_passes: int = 20, dropout_rate: float = 0.3, seed: int = 0
) -> np.ndarray:
    """Predictive entropy of the mean distribution over stochastic passes."""
    bundle.require("classifier")
    X = check_images(X, image_size=bundle.model.config.image_size)
    passes = predict_mc(bundle.model, to_tensor(X), n_passes, dropout_rate, seed)
    return entropy_score(passes.mean(axis=0))


def raw_uncertainty_map(X, bundle: CheckpointBundle) -> np.ndarray:
    """Per-pixel channel-mean |x_hat - x_hat'|, shape (n, H, W)."""
    _require_decoder(bundle, "g1", "g0")
    x_hat, x_hat0 = reconstructions(X, bundle)
    return np.abs(x_hat.astype(np.float64) - x_hat0).mean(axis=-1)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale each map to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 2
    maps = raw[None] if single else raw
    lo = maps.min(axis=(1, 2), keepdims=True)
    span = maps.max(axis=(1, 2), keepdims=True) - lo
    out = np.where(span > 0, (maps - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out[0] if single else out


def uncertainty_map(X, bundle: CheckpointBundle) -> np.ndarray:
    return normalize_map(raw_uncertainty_map(X, bundle))


def save_map(normalized: np.ndarray, path) -> Path:
    """Write an 8-bit grayscale PNG plus a float ``.npy`` sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(normalized, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
    np.save(path.with_suffix(".npy"), np.asarray(normalized, dtype=np.float32))
    return path
