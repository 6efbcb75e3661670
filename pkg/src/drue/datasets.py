"""Synthetic fundus-like data, corruption ladders and image-folder ingestion.

The synthetic task mimics glaucoma screening: every image shows a textured
reddish background with vessels, a bright optic disc and a brighter inner cup.
An image belongs to class 1 iff its cup-to-disc radius ratio exceeds 0.6.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image, UnidentifiedImageError

from ._validation import ConfigurationError

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ("gaussian_noise", "blur", "hue_shift", "contrast", "uniform_noise_replace")
CUP_RATIO_THRESHOLD = 0.6
MANIFEST_HEADER = ("sample_id", "source", "label", "path")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

# Ratios drawn per class; the gap around the threshold keeps the task learnable.
_CLASS_RATIO_RANGES = {0: (0.30, 0.55), 1: (0.65, 0.90)}


@dataclass(frozen=True, eq=False)
class Sample:
    """One image (H, W, 3) float32 in [0, 1] with its label and provenance.

    ``label`` is -1 for unlabeled external images.
    """

    image: np.ndarray
    label: int
    source: str
    sample_id: str

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.label == other.label
            and self.source == other.source
            and np.array_equal(self.image, other.image)
        )


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    seed: int


@dataclass
class Rung:
    name: str
    kind: str | None
    severity: float | None  # None for external datasets
    samples: list[Sample]


@dataclass
class ShiftLadder:
    """Corrupted copies of the ID test set; severity strictly increases along ``rungs``.

    ``external`` holds image folders evaluated alongside the ladder but
    outside its severity order.
    """

    rungs: list[Rung]
    external: list[Rung] = field(default_factory=list)

    def __post_init__(self):
        sev = [r.severity for r in self.rungs]
        if any(b <= a for a, b in zip(sev, sev[1:])):
            raise ConfigurationError(f"rung severities must be strictly increasing, got {sev}")

    def all_rungs(self) -> list[Rung]:
        return [*self.rungs, *self.external]

    def names(self) -> list[str]:
        return [r.name for r in self.all_rungs()]

    def __getitem__(self, name: str) -> Rung:
        for r in self.all_rungs():
            if r.name == name:
                return r
        raise KeyError(name)


class ExternalSamples(list):
    """List of samples loaded from disk; ``skipped`` lists (path, reason) pairs."""

    def __init__(self, samples=(), skipped=()):
        super().__init__(samples)
        self.skipped: list[tuple[str, str]] = list(skipped)


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_labels(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def label_from_ratio(cup_ratio: float) -> int:
    return int(cup_ratio > CUP_RATIO_THRESHOLD)


def _smooth_field(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, n_waves: int = 6) -> np.ndarray:
    out = np.zeros_like(yy)
    for _ in range(n_waves):
        freq = rng.uniform(1.0, 6.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return out / n_waves


def render_fundus(rng: np.random.Generator, image_size: int, cup_ratio: float) -> np.ndarray:
    """Draw one fundus-like image with the given cup-to-disc radius ratio."""
    n = image_size
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    base = np.array([0.62, 0.28, 0.12]) * rng.uniform(0.85, 1.1)
    texture = 0.08 * _smooth_field(rng, yy, xx)[..., None]
    img = base[None, None, :] + texture * np.array([1.0, 0.6, 0.4])

    cy, cx = 0.5 + rng.uniform(-0.08, 0.08, size=2)
    disc_r = rng.uniform(0.13, 0.19)

    # vessels: dark arcs radiating from the disc
    for _ in range(rng.integers(3, 6)):
        angle = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-1.2, 1.2)
        t = np.linspace(0.0, 0.6, 60)
        py = cy + t * np.sin(angle + bend * t)
        px = cx + t * np.cos(angle + bend * t)
        d2 = (yy[..., None] - py) ** 2 + (xx[..., None] - px) ** 2
        width = rng.uniform(0.008, 0.016)
        vessel = np.exp(-d2.min(axis=-1) / (2 * width**2))
        img = img * (1 - 0.45 * vessel[..., None]) + 0.45 * vessel[..., None] * np.array([0.35, 0.05, 0.05])

    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    edge = 1.5 / n
    disc = 1.0 / (1.0 + np.exp((r - disc_r) / edge))
    img = img * (1 - disc[..., None]) + disc[..., None] * np.array([0.95, 0.78, 0.45])

    cup_r = cup_ratio * disc_r
    off = rng.uniform(-0.1, 0.1, size=2) * (disc_r - cup_r)
    rc = np.sqrt((yy - cy - off[0]) ** 2 + (xx - cx - off[1]) ** 2)
    cup = 1.0 / (1.0 + np.exp((rc - cup_r) / edge))
    img = img * (1 - cup[..., None]) + cup[..., None] * np.array([1.0, 0.97, 0.86])

    # circular field of view
    fov = 1.0 / (1.0 + np.exp((np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2) - 0.48) / edge))
    img = img * fov[..., None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(n_per_class: int, image_size: int = 64, seed: int = 0) -> DatasetSplit:
    """Generate a balanced synthetic split (80/10/10 per class).

    Every image is drawn from its own generator seeded by ``(seed, index)``,
    so any sample can be regenerated independently of the others.
    """
    if int(n_per_class) != n_per_class or n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be a positive integer, got {n_per_class!r}")
    if int(image_size) != image_size or image_size < 32:
        raise ConfigurationError(f"image_size must be an integer >= 32, got {image_size!r}")
    n_per_class, image_size = int(n_per_class), int(image_size)

    n_val = n_test = n_per_class // 10
    n_train = n_per_class - n_val - n_test
    parts: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for k in range(n_per_class):
        part = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
        for label in (0, 1):
            index = label * n_per_class + k
            rng = np.random.default_rng([seed, index])
            lo, hi = _CLASS_RATIO_RANGES[label]
            ratio = rng.uniform(lo, hi)
            image = render_fundus(rng, image_size, ratio)
            parts[part].append(
                Sample(image, label_from_ratio(ratio), "synthetic", f"syn{seed}-{index:05d}")
            )
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed)


def _sample_rng(sample_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8"))])


def _fft_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    # periodic Gaussian filter; its transfer function decays monotonically in sigma
    h, w = img.shape[:2]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    transfer = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    spec = np.fft.rfft2(img.astype(np.float64), axes=(0, 1))
    return np.fft.irfft2(spec * transfer[..., None], s=(h, w), axes=(0, 1))


def apply_corruption(s: Sample, kind: str, severity: float, seed: int = 0) -> Sample:
    """Corrupt one sample. Output is deterministic in ``(s.sample_id, seed)``."""
    if kind not in CORRUPTION_KINDS:
        raise ConfigurationError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTION_KINDS}")
    if not 0.0 <= severity <= 1.0:
        raise ConfigurationError(f"severity must lie in [0, 1], got {severity}")
    if severity == 0:
        return s

    x = s.image.astype(np.float64)
    rng = _sample_rng(s.sample_id, seed)
    if kind == "gaussian_noise":
        out = x + 0.5 * severity * rng.standard_normal(x.shape)
    elif kind == "blur":
        out = _fft_blur(x, sigma=3.0 * severity)
    elif kind == "hue_shift":
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = np.mod(hsv[..., 0] + 0.5 * severity, 1.0)
        out = hsv_to_rgb(hsv)
    elif kind == "contrast":
        mean = x.mean()
        out = mean + (1.0 - severity) * (x - mean)
    else:  # uniform_noise_replace
        out = (1.0 - severity) * x + severity * rng.uniform(0.0, 1.0, size=x.shape)
    image = np.clip(out, 0.0, 1.0).astype(np.float32)
    return replace(s, image=image, source=f"{s.source}|{kind}@{severity:g}")


def rung_name(kind: str | None, severity: float) -> str:
    return "clean" if severity == 0 else f"{kind}@{severity:.2f}"


def build_ladder(id_test, kinds, severities, seed: int = 0) -> ShiftLadder:
    """Chain of rungs with strictly increasing severity.

    A single kind is applied at every severity. Otherwise ``kinds`` pairs one to
    one with the nonzero severities, so mild kinds can sit low on the ladder and
    harsh ones high. Severity 0 gives the clean rung, placed first.
    """
    severities = [float(v) for v in severities]
    if not severities:
        raise ConfigurationError("severities must be non-empty")
    if any(b <= a for a, b in zip(severities, severities[1:])):
        raise ConfigurationError(f"severities must be strictly increasing, got {severities}")
    kinds = list(kinds)
    if not kinds:
        raise ConfigurationError("kinds must be non-empty")
    for kind in kinds:
        if kind not in CORRUPTION_KINDS:
            raise ConfigurationError(f"unknown corruption kind {kind!r}")
    shifted = [v for v in severities if v > 0]
    if len(kinds) == 1:
        kinds = kinds * len(shifted)
    elif len(kinds) != len(shifted):
        raise ConfigurationError(
            f"need one kind, or one kind per nonzero severity ({len(shifted)}), got {len(kinds)}"
        )

    rungs: list[Rung] = []
    if severities[0] == 0:
        rungs.append(Rung("clean", None, 0.0, list(id_test)))
    for kind, sev in zip(kinds, shifted):
        samples = [apply_corruption(s, kind, sev, seed) for s in id_test]
        rungs.append(Rung(rung_name(kind, sev), kind, sev, samples))
    return ShiftLadder(rungs)


def _read_image(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_external(path, image_size: int = 64) -> ExternalSamples:
    """Load every raster image under ``path`` (sorted by filename) as unlabeled samples.

    Unreadable files are skipped with a warning and listed in ``.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise ConfigurationError(f"{root} contains no files")

    out = ExternalSamples()
    for p in files:
        try:
            image = _read_image(p, image_size)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            msg = f"skipping unreadable image {p.name}: {exc}"
            warnings.warn(msg, stacklevel=2)
            out.skipped.append((p.name, str(exc)))
            continue
        out.append(Sample(image, -1, root.name, f"{root.name}/{p.name}"))
    if not out:
        raise ConfigurationError(f"no readable images in {root}")
    return out


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(row)


def save_split(split: DatasetSplit, directory) -> Path:
    """Persist a split as 8-bit PNGs plus ``manifest.csv`` and ``split.json``."""
    directory = Path(directory)
    rows = []
    for part in ("train", "val", "test"):
        (directory / part).mkdir(parents=True, exist_ok=True)
        for s in getattr(split, part):
            rel = f"{part}/{s.sample_id}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(directory / rel)
            rows.append((s.sample_id, s.source, s.label, rel))
    write_manifest(rows, directory / "manifest.csv")
    meta = {"seed": split.seed, "counts": {p: len(getattr(split, p)) for p in ("train", "val", "test")}}
    (directory / "split.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.csv"


def load_split(directory) -> DatasetSplit:
    directory = Path(directory)
    meta = json.loads((directory / "split.json").read_text())
    parts: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    with open(directory / "manifest.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ConfigurationError(f"bad manifest header in {directory}: {reader.fieldnames}")
        for row in reader:
            part = row["path"].split("/", 1)[0]
            with Image.open(directory / row["path"]) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            parts[part].append(Sample(image, int(row["label"]), row["source"], row["sample_id"]))
    return DatasetSplit(parts["train"], parts["val"], parts["test"], int(meta["seed"]))
