"""Exceptions and input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np
import torch


class ConfigurationError(ValueError):
    """Raised for invalid settings or a missing prerequisite stage."""


class ContractViolation(ValueError):
    """Raised when an input breaks a documented shape or range contract."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def check_images(X, *, image_size: int | None = None, copy: bool = False) -> np.ndarray:
    """Validate a batch of images laid out as (n, H, W, 3) with values in [0, 1].

    A single (H, W, 3) image is promoted to a batch of one.
    """
    X = np.array(X, dtype=np.float32) if copy else np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ContractViolation(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ContractViolation("expected at least one image")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ContractViolation(
            f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}"
        )
    if not np.all(np.isfinite(X)):
        raise ContractViolation("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ContractViolation("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ContractViolation(f"expected {n} labels, got shape {y.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractViolation("labels must be 0 or 1")
    return y.astype(np.int64)


def check_probabilities(probs, atol: float = 1e-4) -> np.ndarray:
    """Return ``probs`` as a 2-D float64 array after checking it lies on the simplex."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(p < 0):
        raise ContractViolation("probabilities must be nonnegative")
    dev = np.abs(p.sum(axis=1) - 1.0)
    if np.any(dev > atol):
        raise ContractViolation(f"probabilities must sum to 1 (max deviation {dev.max():.3g})")
    return p


def to_tensor(X: np.ndarray) -> torch.Tensor:
    """(n, H, W, C) numpy batch -> (n, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_images(t: torch.Tensor) -> np.ndarray:
    """(n, C, H, W) tensor -> (n, H, W, C) numpy batch."""
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()
