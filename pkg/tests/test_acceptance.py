"""Acceptance gate: one test per criterion, each printing a single pass/fail line.

The desk experiment (default config, 3 seeds) runs once per session through the
command line entry point; criteria 2 and 4 to 8 read its artifacts.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from drue.backbone import EncoderConfig
from drue.cli import main
from drue.config import RunConfig
from drue.datasets import generate_synthetic, stack_images
from drue.evaluation import EvalReport, auc, aupr
from drue.training import CheckpointBundle, TrainConfig, load_checkpoint, train_classifier, train_g0
from drue.uncertainty import drue_score, raw_uncertainty_map

from conftest import ACCEPTANCE, SMALL
from oracles import enumerated_aupr, pairwise_auc

DESK_BUDGET_S = 15 * 60
THEORY_BUDGET_S = 2 * 60
FAR_RUNG = "uniform_noise_replace@1.00"


def gate(number: int, title: str, checks: dict, detail: str = "") -> None:
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    ACCEPTANCE.append((number, title, ok, detail + (f" | failed: {failed}" if failed else "")))
    assert ok, f"criterion {number} failed checks {failed}: {detail}"


def _cli(*argv) -> float:
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    assert code == 0, f"drue {' '.join(map(str, argv))} exited with {code}"
    return time.perf_counter() - start


def _write_config(path: Path, run_dir: Path) -> Path:
    data = RunConfig().model_dump()
    data["paths"]["run_dir"] = str(run_dir)
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = _write_config(root / "config.yaml", root / "run")
    elapsed = sum(_cli(cmd, *extra, "--config", config)
                  for cmd, *extra in (["prepare"], ["train", "--stage", "all"], ["evaluate"]))
    return {"config": config, "run": root / "run", "seconds": elapsed, "root": root}


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_auc = worst_aupr = 0.0
    for _ in range(200):
        n_id = int(rng.integers(1, 11))
        n_ood = int(rng.integers(1, 21 - n_id))
        # coarse grid forces ties and duplicates
        a = list(rng.integers(0, 5, n_id) / 4)
        b = list(rng.integers(0, 5, n_ood) / 4)
        worst_auc = max(worst_auc, abs(auc(a, b) - pairwise_auc(a, b)))
        worst_aupr = max(worst_aupr, abs(aupr(a, b) - enumerated_aupr(a, b)))
    worked = (
        abs(auc([0.1, 0.5], [0.3, 0.7]) - 0.75) < 1e-9,
        abs(aupr([0.1, 0.5], [0.3, 0.7]) - 0.8333) < 1e-4,
        abs(aupr([0.8, 0.9], [0.1, 0.2]) - 0.4167) < 1e-4,
    )
    seconds = time.perf_counter() - start
    gate(1, "metric oracle equivalence", {
        "auc matches pairwise count": worst_auc <= 1e-9,
        "aupr matches PR enumeration": worst_aupr <= 1e-9,
        "worked values": all(worked),
        "runtime < 5 s": seconds < 5,
    }, f"max |auc diff| {worst_auc:.1e}, max |aupr diff| {worst_aupr:.1e}, {seconds:.2f} s")


# -- 2 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_freeze_invariant(desk):
    seeds = RunConfig().eval.seeds
    bitwise, reports = True, []
    for seed in seeds:
        g1 = load_checkpoint(desk["run"] / f"seed_{seed}" / "g1.ckpt")
        g0 = load_checkpoint(desk["run"] / f"seed_{seed}" / "g0.ckpt")
        before, after = g1.decoder.tail.state_dict(), g0.decoder.tail.state_dict()
        assert sorted(f"tail.{k}" for k in dict(g0.decoder.tail.named_parameters())) == sorted(
            g0.decoder.shared_manifest())
        bitwise &= all(torch.equal(before[k], after[k]) for k in before)
        reports.append(g0.freeze_report)

    # freeze disabled: a single optimiser step must move the shared tail
    split = generate_synthetic(10, 32, seed=0)
    clf = train_classifier(split, TrainConfig(learning_rate=1e-3, max_epochs=1, patience=1, stage="classifier"),
                           EncoderConfig(**SMALL))
    bare = CheckpointBundle(model=clf.model, stages=["classifier"])
    one_step = TrainConfig(learning_rate=1e-3, batch_size=len(split.train), max_epochs=1, patience=1, stage="g0")
    unfrozen = train_g0(bare, split, one_step, freeze=False)
    gate(2, "freeze invariant", {
        "shared tail bitwise equal to g1.ckpt": bitwise,
        "freeze_report == 0": all(r == 0.0 for r in reports),
        "unfrozen drift > 0": unfrozen.freeze_report > 0,
    }, f"freeze_report per seed {reports}, unfrozen drift {unfrozen.freeze_report:.3g}")


# -- 3 ---------------------------------------------------------------------------------


class _FixedPair(torch.nn.Module):
    def __init__(self, x1, x0):
        super().__init__()
        self.x1, self.x0 = x1, x0

    def g1(self, m1):
        return self.x1.expand(len(m1), -1, -1, -1)

    def g0(self, m0):
        return self.x0.expand(len(m0), -1, -1, -1)


@pytest.mark.slow
def test_criterion_3_drue_definition(desk):
    bundle = load_checkpoint(desk["run"] / "seed_0" / "g0.ckpt")
    X = stack_images(generate_synthetic(10, 64, seed=11).test)
    img = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    same = CheckpointBundle(bundle.model, _FixedPair(img, img.clone()), ["classifier", "g1", "g0"])
    gap = CheckpointBundle(bundle.model, _FixedPair(torch.full_like(img, 0.3), torch.full_like(img, 0.5)),
                           ["classifier", "g1", "g0"])
    zero = drue_score(X, same)
    constant = drue_score(X, gap)
    map_err = float(np.max(np.abs(raw_uncertainty_map(X, bundle).mean(axis=(1, 2)) - drue_score(X, bundle))))
    gate(3, "DRUE definitional checks", {
        "identical reconstructions -> 0": bool(np.all(zero == 0.0)),
        "constant 0.2 gap -> 0.2": bool(np.all(np.abs(constant - 0.2) <= 1e-7)),
        "map mean == score": map_err <= 1e-7,
    }, f"max |0.2 gap error| {np.max(np.abs(constant - 0.2)):.1e}, max |map mean - score| {map_err:.1e}")


# -- 4 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_taylor_verification(desk):
    seconds = _cli("theory", "--config", desk["config"], "--scales", "0.1", "0.01", "0.001")
    result = json.loads((desk["run"] / "theory.json").read_text())
    slope = result["smooth_decoder"]["slope"]
    gaps = [g["relative_gap"] for g in sorted(result["drue_vs_jvp"], key=lambda g: -g["scale"])]
    scales = sorted((g["scale"] for g in result["drue_vs_jvp"]), reverse=True)
    gate(4, "Taylor remainder verification", {
        "smooth decoder slope in [1.8, 2.2]": slope is not None and 1.8 <= slope <= 2.2,
        "quadratic toy residual 0.0476": abs(result["quadratic_toy_residual"] - 0.047619047619) <= 1e-6,
        "gap sweep spans 3 decades": scales[0] / scales[-1] >= 1e3 * (1 - 1e-9),
        "gap decreases monotonically": all(b <= a for a, b in zip(gaps, gaps[1:])),
        "runtime < 2 min": seconds < THEORY_BUDGET_S,
    }, f"smooth slope {slope:.3f}, relu slope {result['trained_decoder']['slope']}, "
       f"gaps {[round(g, 4) for g in gaps]}, {seconds:.0f} s")


# -- 5 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_desk_ood_experiment(desk):
    report = EvalReport.from_json((desk["run"] / "report.json").read_text())
    cells = sorted((c for c in report.cells if c["method"] == "drue" and c["severity"] is not None),
                   key=lambda c: c["severity"])
    medians = np.array([c["median_score_per_seed"] for c in cells])  # (rung, seed)
    monotone = bool(np.all(np.diff(medians, axis=0) >= 0))
    far = report.cell(FAR_RUNG, "drue")["auc"]
    clean = report.cell("clean", "drue")["auc"]
    per_seed = {s: [round(float(v), 5) for v in medians[:, i]] for i, s in enumerate(report.seeds)}
    gate(5, "desk OOD experiment", {
        "end-to-end <= 15 min": desk["seconds"] <= DESK_BUDGET_S,
        "median DRUE nondecreasing along ladder, every seed": monotone,
        "far-OOD DRUE AUC >= 0.95": far["mean"] >= 0.95,
        "clean rung AUC in [0.4, 0.6]": 0.4 <= clean["mean"] <= 0.6,
    }, f"{desk['seconds']:.0f} s, rungs {[c['dataset'] for c in cells]}, medians by seed {per_seed}, "
       f"far AUC {far['mean']:.3f}, clean AUC {clean['mean']:.3f}")


# -- 6 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_ablation(desk):
    _cli("ablate", "--config", desk["config"])
    table = json.loads((desk["run"] / "ablation.json").read_text())
    rows = table["rows"]
    shape = [(r["location"], r["freeze"], r["method"]) for r in rows]
    expected = [("final", False, "rue"), ("penultimate", False, "rue_penultimate"),
                ("final", True, "rue"), ("final+penultimate", True, "drue")]
    complete = all({"mean", "std"} <= set(r[m]) for r in rows for m in ("auc", "aupr"))
    aucs = [r["auc"]["mean"] for r in rows]
    gate(6, "ablation structure", {
        "exactly four configurations": shape == expected,
        "AUC and AUPR mean/std present": complete,
        "row 3 (DRUE) AUC >= row 1 AUC": aucs[3] >= aucs[1],
    }, "AUC by row " + ", ".join(f"{i}: {r['auc']['mean']:.3f}±{r['auc']['std']:.3f}" for i, r in enumerate(rows)))


# -- 7 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_classifier_sanity(desk):
    metrics = json.loads((desk["run"] / "classifier.json").read_text())
    acc = {s: m["accuracy"] for s, m in metrics.items()}
    cls_auc = {s: m["auc"] for s, m in metrics.items()}
    gate(7, "classifier sanity", {
        "accuracy >= 0.95 every seed": all(v >= 0.95 for v in acc.values()),
        "AUC >= 0.97 every seed": all(v >= 0.97 for v in cls_auc.values()),
    }, f"accuracy {acc}, AUC {cls_auc}")


# -- 8 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_determinism(desk):
    twin = _write_config(desk["root"] / "twin.yaml", desk["root"] / "twin")
    for cmd, *extra in (["prepare"], ["train", "--stage", "all"], ["evaluate"]):
        _cli(cmd, *extra, "--config", twin)
    first, second = desk["run"], desk["root"] / "twin"
    same_report = (first / "report.json").read_bytes() == (second / "report.json").read_bytes()
    csvs = sorted(p.name for p in (first / "scores").glob("seed_*.csv"))
    same_scores = bool(csvs) and all(
        (first / "scores" / n).read_bytes() == (second / "scores" / n).read_bytes() for n in csvs)
    gate(8, "determinism", {
        "byte-identical EvalReport": same_report,
        "identical ScoreRecord CSVs": same_scores,
    }, f"compared report.json and {csvs}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
