"""OOD-detection metrics, multi-seed reports, the ablation runner and score exports.

Conventions: OOD is the positive class, AUC gives ties half credit, and AUPR
is step-wise average precision with tied scores handled as one threshold.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._validation import ConfigurationError, to_tensor
from .backbone import predict
from .datasets import DatasetSplit, ShiftLadder, stack_images, stack_labels
from .training import CheckpointBundle, TrainConfig, train_g0
from .uncertainty import UncertaintyMethod

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCORE_HEADER = ("sample_id", "dataset", "method", "score", "is_ood")
ID_DATASET = "id"
CONVENTIONS = {
    "positive_class": "ood",
    "auc_ties": "half credit",
    "aupr": "step-wise average precision, tied scores form one threshold",
    "score_orientation": "higher means more uncertain",
    "std": "population (ddof=0) across seeds",
}


class ScoreFileError(ValueError):
    """Malformed ScoreRecord CSV; the message names the offending line."""


def _check_pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auc/aupr need non-empty ID and OOD score lists")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores must be finite")
    return a, b


def auc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score) with ties counted 1/2."""
    a, b = _check_pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    # twice the Mann-Whitney U statistic, an exact integer
    u2 = int(round(2 * ranks[a.size :].sum())) - b.size * (b.size + 1)
    n2 = 2 * a.size * b.size
    if 2 * u2 >= n2:
        return u2 / n2
    # complementary branch keeps auc(a, b) + auc(b, a) == 1 exact in floating point
    return 1.0 - (n2 - u2) / n2


def aupr(id_scores, ood_scores) -> float:
    """Average precision with OOD as the positive class."""
    a, b = _check_pair(id_scores, ood_scores)
    scores = np.concatenate([a, b])
    positive = np.concatenate([np.zeros(a.size), np.ones(b.size)])
    order = np.argsort(-scores, kind="stable")
    scores, positive = scores[order], positive[order]
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(positive)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0.0, tp]) / b.size
    return float(np.sum(recall_step * precision))


# -- score records ------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    dataset: str
    method: str
    score: float
    is_ood: bool


def write_scores(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seen = set()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in records:
            key = (r.sample_id, r.dataset, r.method)
            if key in seen:
                raise ValueError(f"duplicate score record {key}")
            if not math.isfinite(r.score):
                raise ValueError(f"non-finite score for {key}")
            seen.add(key)
            writer.writerow((r.sample_id, r.dataset, r.method, repr(float(r.score)), int(bool(r.is_ood))))
    return path


def read_scores(path) -> list[ScoreRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SCORE_HEADER:
            raise ScoreFileError(f"{path}:1: expected header {','.join(SCORE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SCORE_HEADER):
                raise ScoreFileError(f"{path}:{lineno}: expected {len(SCORE_HEADER)} fields, got {len(row)}")
            try:
                score = float(row[3])
            except ValueError:
                raise ScoreFileError(f"{path}:{lineno}: score {row[3]!r} is not a number") from None
            if not math.isfinite(score):
                raise ScoreFileError(f"{path}:{lineno}: score must be finite")
            flag = row[4].strip().lower()
            if flag not in ("0", "1", "true", "false"):
                raise ScoreFileError(f"{path}:{lineno}: is_ood must be 0/1 or true/false, got {row[4]!r}")
            records.append(ScoreRecord(row[0], row[1], row[2], score, flag in ("1", "true")))
    return records


# -- OOD evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    """Per (dataset, method) AUC/AUPR across seeds, in ladder order."""

    seeds: list[int]
    config_hash: str
    cells: list[dict] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def cell(self, dataset: str, method: str) -> dict:
        for c in self.cells:
            if c["dataset"] == dataset and c["method"] == method:
                return c
        raise KeyError((dataset, method))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


def _method_key(method: UncertaintyMethod) -> str:
    if method.name == "rue" and method.params.get("tap", "final") != "final":
        return f"rue_{method.params['tap']}"
    return method.name


def score_datasets(bundle: CheckpointBundle, id_test, ladder: ShiftLadder, method: UncertaintyMethod):
    """Score the ID test set and every rung; returns ScoreRecords in ladder order."""
    key = _method_key(method)
    records = []
    s = method(stack_images(id_test), bundle)
    records += [ScoreRecord(x.sample_id, ID_DATASET, key, float(v), False) for x, v in zip(id_test, s)]
    for rung in ladder.all_rungs():
        s = method(stack_images(rung.samples), bundle)
        records += [ScoreRecord(x.sample_id, rung.name, key, float(v), True) for x, v in zip(rung.samples, s)]
    return records


def _as_method(m) -> UncertaintyMethod:
    if isinstance(m, UncertaintyMethod):
        return m
    if isinstance(m, str):
        return UncertaintyMethod(m)
    name, params = m
    return UncertaintyMethod(name, dict(params))


def run_ood_eval(
    bundles: dict[int, CheckpointBundle],
    ladder: ShiftLadder,
    methods,
    id_test,
    score_dir=None,
    config=None,
    method_params: dict | None = None,
) -> EvalReport:
    """Compare ID test scores against every rung for each method and seed.

    With ``score_dir`` set, one ``seed_<n>.csv`` ScoreRecord file is written
    per seed. A method whose prerequisite stage is missing is reported under
    ``errors`` while the other methods proceed.
    """
    if not bundles:
        raise ConfigurationError("run_ood_eval needs at least one bundle")
    method_params = method_params or {}
    methods = [_as_method(m) for m in methods]
    seeds = sorted(bundles)
    report = EvalReport(seeds=seeds, config_hash=config_hash(config if config is not None else {}))
    per_seed: dict[tuple[str, str], dict[str, list]] = {}
    for seed in seeds:
        bundle = bundles[seed]
        records = []
        for method in methods:
            params = dict(method.params)
            if method.name == "mc_dropout":
                params.setdefault("seed", seed)
            params.update(method_params.get(method.name, {}))
            method = UncertaintyMethod(method.name, params)
            key = _method_key(method)
            try:
                bundle.require(*method.required_stages())
            except ConfigurationError as exc:
                report.errors[key] = str(exc)
                logger.warning("skipping %s for seed %s: %s", key, seed, exc)
                continue
            recs = score_datasets(bundle, id_test, ladder, method)
            records += recs
            id_scores = [r.score for r in recs if r.dataset == ID_DATASET]
            for rung in ladder.all_rungs():
                ood = [r.score for r in recs if r.dataset == rung.name]
                cell = per_seed.setdefault((rung.name, key), {"auc": [], "aupr": [], "median": []})
                cell["auc"].append(auc(id_scores, ood))
                cell["aupr"].append(aupr(id_scores, ood))
                cell["median"].append(float(np.median(ood)))
        if score_dir is not None:
            write_scores(records, Path(score_dir) / f"seed_{seed}.csv")

    rung_info = {r.name: r for r in ladder.all_rungs()}
    for (dataset, method), vals in per_seed.items():
        rung = rung_info[dataset]
        report.cells.append({
            "dataset": dataset,
            "method": method,
            "kind": rung.kind,
            "severity": rung.severity,
            "auc": {**_stats(vals["auc"]), "per_seed": vals["auc"]},
            "aupr": {**_stats(vals["aupr"]), "per_seed": vals["aupr"]},
            "median_score_per_seed": vals["median"],
        })
    order = {name: i for i, name in enumerate(ladder.names())}
    report.cells.sort(key=lambda c: (c["method"], order[c["dataset"]]))
    return report


# -- ablation -----------------------------------------------------------------------

ABLATION_ROWS = (
    {"row": 0, "location": "final", "freeze": False, "score": "rue"},
    {"row": 1, "location": "penultimate", "freeze": False, "score": "rue"},
    {"row": 2, "location": "final", "freeze": True, "score": "rue"},
    {"row": 3, "location": "final+penultimate", "freeze": True, "score": "drue"},
)


def _shifted_mean(report: EvalReport, ladder: ShiftLadder, method: str, metric: str, i: int) -> float:
    vals = [report.cell(r.name, method)[metric]["per_seed"][i] for r in ladder.rungs if r.severity > 0]
    return float(np.mean(vals))


def run_ablation(
    split: DatasetSplit,
    ladder: ShiftLadder,
    bundles: dict[int, CheckpointBundle],
    g0_config: TrainConfig,
) -> dict:
    """Evaluate the four decoder configurations of the two-decoder ablation.

    ``bundles`` hold, per seed, a classifier with trained G1 and a frozen-tail
    G0. Row 0 trains a fresh single decoder on the final tap without any
    freezing; the other rows reuse the bundle's decoders.
    """
    if not ladder.rungs or all(r.severity == 0 for r in ladder.rungs):
        raise ConfigurationError("ablation needs at least one shifted rung")
    seeds = sorted(bundles)
    row_bundles: dict[int, dict[int, CheckpointBundle]] = {0: {}, 1: {}, 2: {}, 3: {}}
    for seed in seeds:
        b = bundles[seed]
        b.require("classifier", "g1", "g0")
        if not b.freeze:
            raise ConfigurationError(f"seed {seed}: bundle G0 was not trained with a frozen tail")
        fresh = CheckpointBundle(model=b.model, stages=["classifier"], history=dict(b.history), config=dict(b.config))
        cfg = TrainConfig(**{**asdict(g0_config), "seed": seed, "stage": "g0"})
        row_bundles[0][seed] = train_g0(fresh, split, cfg, freeze=False,
                                        activation=b.decoder.config.activation)
        for row in (1, 2, 3):
            row_bundles[row][seed] = b

    methods = {
        0: UncertaintyMethod("rue", {"tap": "final"}),
        1: UncertaintyMethod("rue", {"tap": "penultimate"}),
        2: UncertaintyMethod("rue", {"tap": "final"}),
        3: UncertaintyMethod("drue"),
    }
    rows = []
    for spec in ABLATION_ROWS:
        row = spec["row"]
        method = methods[row]
        report = run_ood_eval(row_bundles[row], ladder, [method], split.test)
        key = _method_key(method)
        aucs = [_shifted_mean(report, ladder, key, "auc", i) for i in range(len(seeds))]
        auprs = [_shifted_mean(report, ladder, key, "aupr", i) for i in range(len(seeds))]
        rows.append({
            **spec,
            "method": key,
            "auc": {**_stats(aucs), "per_seed": aucs},
            "aupr": {**_stats(auprs), "per_seed": auprs},
            "freeze_report": [row_bundles[row][s].freeze_report if row in (0, 2, 3) else None for s in seeds],
            "per_rung": [
                {"dataset": c["dataset"], "auc": c["auc"]["mean"], "aupr": c["aupr"]["mean"]}
                for c in report.cells
            ],
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "seeds": seeds,
        "aggregate": "mean over rungs with severity > 0, then mean/std across seeds",
        "rows": rows,
    }


# -- classifier sanity --------------------------------------------------------------


def classifier_metrics(bundle: CheckpointBundle, samples) -> dict:
    """Accuracy at argmax and the class-1 probability AUC against true labels."""
    bundle.require("classifier")
    if len(samples) == 0:
        raise ValueError("classifier_metrics needs a non-empty test set")
    y = stack_labels(samples)
    probs = predict(bundle.model, to_tensor(stack_images(samples)))
    accuracy = float(np.mean(probs.argmax(axis=1) == y))
    p1 = probs[:, 1]
    if np.all(y == y[0]):
        cls_auc = float("nan")
    else:
        cls_auc = auc(p1[y == 0], p1[y == 1])
    return {"accuracy": accuracy, "auc": cls_auc, "n": int(len(y))}


# -- distribution export ------------------------------------------------------------


def export_distributions(score_files, n_bins: int = 30) -> dict:
    """Histogram every (dataset, method) group with bin edges shared per method.

    Datasets keep the order in which they first appear in the files.
    """
    if isinstance(score_files, (str, Path)):
        score_files = [score_files]
    groups: dict[str, dict[str, list[float]]] = {}
    for path in score_files:
        for r in read_scores(path):
            groups.setdefault(r.method, {}).setdefault(r.dataset, []).append(r.score)
    out = {"schema_version": SCHEMA_VERSION, "n_bins": n_bins, "methods": {}}
    for method, datasets in groups.items():
        allv = np.concatenate([np.asarray(v) for v in datasets.values()])
        lo, hi = float(allv.min()), float(allv.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, n_bins + 1)
        entry = {"bin_edges": edges.tolist(), "datasets": []}
        for name, values in datasets.items():
            v = np.asarray(values)
            counts, _ = np.histogram(v, bins=edges)
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            entry["datasets"].append({
                "dataset": name,
                "counts": counts.tolist(),
                "n": int(v.size),
                "median": float(med),
                "q1": float(q1),
                "q3": float(q3),
            })
        out["methods"][method] = entry
    return out
