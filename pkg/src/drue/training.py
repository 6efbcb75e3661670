"""Staged training: classifier, then G1, then the G0 head over a frozen tail."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigurationError, TrainingDivergedError, to_tensor
from .backbone import EncoderConfig, ResidualClassifier
from .datasets import DatasetSplit, stack_images, stack_labels
from .decoders import DecoderPair

logger = logging.getLogger(__name__)

STAGES = ("classifier", "g1", "g0")
_STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    stage: str = "classifier"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")


@dataclass
class CheckpointBundle:
    """Classifier, decoder pair and the bookkeeping of every stage run so far."""

    model: ResidualClassifier
    decoder: DecoderPair | None = None
    stages: list[str] = field(default_factory=list)
    history: dict[str, list[dict]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    freeze_report: float | None = None
    freeze: bool | None = None

    def has(self, stage: str) -> bool:
        return stage in self.stages

    def require(self, *stages: str) -> None:
        missing = [s for s in stages if s not in self.stages]
        if missing:
            raise ConfigurationError(f"bundle is missing stage(s) {missing}; completed: {self.stages}")

    def copy(self) -> "CheckpointBundle":
        return copy.deepcopy(self)


def mse(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error over every pixel and channel."""
    return ((prediction - target) ** 2).mean()


def run_early_stopping(
    train_epoch: Callable[[int], float],
    validate: Callable[[], float],
    max_epochs: int,
    patience: int,
    snapshot: Callable[[], object],
    restore: Callable[[object], None],
) -> list[dict]:
    """Epoch loop that restores the state with the lowest validation loss.

    Stops once ``patience`` consecutive epochs fail to improve on the best
    validation loss.
    """
    history = []
    best, best_state, bad = math.inf, None, 0
    for epoch in range(max_epochs):
        train_loss = train_epoch(epoch)
        val_loss = validate()
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch + 1}: train={train_loss}, val={val_loss}"
            )
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best:
            best, best_state, bad = val_loss, snapshot(), 0
        else:
            bad += 1
            if bad >= patience:
                break
    if best_state is not None:
        restore(best_state)
    return history


def _state_of(modules: list[nn.Module]):
    return [copy.deepcopy(m.state_dict()) for m in modules]


def _load_into(modules: list[nn.Module], states) -> None:
    for m, s in zip(modules, states):
        m.load_state_dict(s)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(perm[start : start + batch_size])


def _fit(
    params: list[nn.Parameter],
    modules: list[nn.Module],
    loss_fn: Callable[[torch.Tensor, bool], torch.Tensor],
    n_train: int,
    n_val: int,
    cfg: TrainConfig,
    stage: str,
) -> list[dict]:
    if n_train == 0 or n_val == 0:
        raise ConfigurationError("training needs non-empty train and val sets")
    rng = np.random.default_rng([cfg.seed, _STAGE_INDEX[stage]])
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    def train_epoch(epoch: int) -> float:
        total = 0.0
        for idx in _batches(n_train, cfg.batch_size, rng):
            for m in modules:
                m.train()
            opt.zero_grad()
            loss = loss_fn(idx, True)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{stage}: non-finite training loss at epoch {epoch + 1}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        return total / n_train

    @torch.no_grad()
    def validate() -> float:
        for m in modules:
            m.eval()
        total = 0.0
        for start in range(0, n_val, 64):
            idx = torch.arange(start, min(start + 64, n_val))
            total += loss_fn(idx, False).item() * len(idx)
        return total / n_val

    history = run_early_stopping(
        train_epoch, validate, cfg.max_epochs, cfg.patience,
        lambda: _state_of(modules), lambda s: _load_into(modules, s),
    )
    for m in modules:
        m.eval()
    last = history[-1]
    logger.info("%s: %d epochs, best val loss %.5f (last %.5f)", stage, len(history),
                min(h["val_loss"] for h in history), last["val_loss"])
    return history


def train_classifier(split: DatasetSplit, cfg: TrainConfig, encoder: EncoderConfig | None = None) -> CheckpointBundle:
    """Fit the classifier with Adam on cross-entropy, restoring the best validation epoch."""
    X_tr, y_tr = to_tensor(stack_images(split.train)), torch.from_numpy(stack_labels(split.train))
    X_va, y_va = to_tensor(stack_images(split.val)), torch.from_numpy(stack_labels(split.val))
    torch.manual_seed(cfg.seed)
    model = ResidualClassifier(encoder or EncoderConfig(image_size=X_tr.shape[-1]))

    def loss_fn(idx, train):
        X, y = (X_tr, y_tr) if train else (X_va, y_va)
        return F.cross_entropy(model(X[idx]), y[idx])

    history = _fit(list(model.parameters()), [model], loss_fn, len(X_tr), len(X_va), cfg, "classifier")
    model.requires_grad_(False)
    return CheckpointBundle(
        model=model,
        stages=["classifier"],
        history={"classifier": history},
        config={"classifier": asdict(cfg), "encoder": asdict(model.config)},
    )


@torch.no_grad()
def _features(model: ResidualClassifier, samples, batch_size: int = 64):
    X = to_tensor(stack_images(samples))
    model.eval()
    m1s, m0s = [], []
    for start in range(0, len(X), batch_size):
        m1, m0 = model.forward_features(X[start : start + batch_size])
        m1s.append(m1)
        m0s.append(m0)
    return X, torch.cat(m1s), torch.cat(m0s)


def _param_drift(before: dict[str, torch.Tensor], module: nn.Module) -> float:
    after = dict(module.named_parameters())
    return max((after[k].detach() - v).abs().max().item() for k, v in before.items())


def train_g1(
    bundle: CheckpointBundle, split: DatasetSplit, cfg: TrainConfig, activation: str | None = None
) -> CheckpointBundle:
    """Fit G1 (the shared tail) on penultimate features; encoder and head stay fixed."""
    bundle.require("classifier")
    out = bundle.copy()
    model = out.model
    model.requires_grad_(False)
    if out.decoder is None:
        torch.manual_seed(cfg.seed)
        out.decoder = DecoderPair.from_encoder(model.config, activation)
    pair = out.decoder
    X_tr, m1_tr, _ = _features(model, split.train)
    X_va, m1_va, _ = _features(model, split.val)

    def loss_fn(idx, train):
        X, m1 = (X_tr, m1_tr) if train else (X_va, m1_va)
        return mse(pair.g1(m1[idx]), X[idx])

    pair.requires_grad_(False)
    pair.tail.requires_grad_(True)
    try:
        history = _fit(list(pair.tail.parameters()), [pair], loss_fn, len(X_tr), len(X_va), cfg, "g1")
    finally:
        pair.requires_grad_(False)
    out.stages = [s for s in out.stages if s not in ("g1", "g0")] + ["g1"]
    out.history = {k: v for k, v in out.history.items() if k not in ("g1", "g0")}
    out.history["g1"] = history
    out.config["g1"] = asdict(cfg)
    out.freeze_report = None
    return out


def train_g0(
    bundle: CheckpointBundle, split: DatasetSplit, cfg: TrainConfig, freeze: bool = True,
    activation: str | None = None,
) -> CheckpointBundle:
    """Fit G0 on final features.

    With ``freeze`` the tail keeps G1's values and only the head block learns;
    otherwise head and tail are optimised together, starting from whatever the
    bundle holds (a fresh decoder if it has none).
    """
    bundle.require("classifier")
    if freeze and not bundle.has("g1"):
        raise ConfigurationError("train_g0 with freeze=True needs a completed g1 stage")
    out = bundle.copy()
    model = out.model
    model.requires_grad_(False)
    if out.decoder is None:
        torch.manual_seed(cfg.seed)
        out.decoder = DecoderPair.from_encoder(model.config, activation)
    pair = out.decoder
    tail_before = {k: v.detach().clone() for k, v in pair.tail.named_parameters()}
    X_tr, _, m0_tr = _features(model, split.train)
    X_va, _, m0_va = _features(model, split.val)

    def loss_fn(idx, train):
        X, m0 = (X_tr, m0_tr) if train else (X_va, m0_va)
        return mse(pair.g0(m0[idx]), X[idx])

    pair.requires_grad_(False)
    pair.head.requires_grad_(True)
    params = list(pair.head.parameters())
    if not freeze:
        pair.tail.requires_grad_(True)
        params += list(pair.tail.parameters())
    try:
        history = _fit(params, [pair], loss_fn, len(X_tr), len(X_va), cfg, "g0")
    finally:
        pair.requires_grad_(False)
    out.freeze_report = _param_drift(tail_before, pair.tail)
    out.freeze = freeze
    out.stages = [s for s in out.stages if s != "g0"] + ["g0"]
    out.history["g0"] = history
    out.config["g0"] = {**asdict(cfg), "freeze": freeze}
    return out


# -- checkpoint files ---------------------------------------------------------------


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    model = bundle.model
    payload = {
        "format": 1,
        "arch_hash": model.config.arch_hash(),
        "encoder": asdict(model.config),
        "classifier": model.state_dict(),
        "stages": list(bundle.stages),
        "history": bundle.history,
        "config": bundle.config,
        "freeze_report": bundle.freeze_report,
        "freeze": bundle.freeze,
    }
    if bundle.decoder is not None:
        payload["decoder_activation"] = bundle.decoder.config.activation
        payload["g0_head"] = bundle.decoder.head.state_dict()
        payload["shared_tail"] = bundle.decoder.tail.state_dict()
        payload["shared_manifest"] = bundle.decoder.shared_manifest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> CheckpointBundle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    enc = EncoderConfig(**payload["encoder"])
    if enc.arch_hash() != payload["arch_hash"]:
        raise ConfigurationError(f"{path}: architecture hash mismatch")
    model = ResidualClassifier(enc)
    model.load_state_dict(payload["classifier"])
    model.requires_grad_(False)
    model.eval()
    decoder = None
    if "shared_tail" in payload:
        decoder = DecoderPair.from_encoder(enc, payload["decoder_activation"])
        if decoder.shared_manifest() != payload["shared_manifest"]:
            raise ConfigurationError(f"{path}: shared manifest does not match the decoder architecture")
        decoder.head.load_state_dict(payload["g0_head"])
        decoder.tail.load_state_dict(payload["shared_tail"])
        decoder.requires_grad_(False)
        decoder.eval()
    return CheckpointBundle(
        model=model,
        decoder=decoder,
        stages=list(payload["stages"]),
        history=payload["history"],
        config=payload["config"],
        freeze_report=payload["freeze_report"],
        freeze=payload["freeze"],
    )
