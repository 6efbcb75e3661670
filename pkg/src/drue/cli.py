"""Command line entry point: ``drue <command> [--config PATH] [--seed N] ...``.

Every artifact lives under the run directory named in the config::

    <run_dir>/config.snapshot
    <run_dir>/data/                    manifest.csv, split.json, train/ val/ test/
    <run_dir>/seed_<n>/                classifier.ckpt g1.ckpt g0.ckpt history.json
    <run_dir>/scores/                  ScoreRecord CSVs
    <run_dir>/report.json              OOD report
    <run_dir>/histograms.json          score distributions
    <run_dir>/classifier.json          classifier sanity metrics
    <run_dir>/ablation.json
    <run_dir>/theory.json
    <run_dir>/plots/

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 runtime failure.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from . import datasets as ds
from ._validation import ConfigurationError, ContractViolation
from .config import RunConfig, load_config
from .evaluation import (
    ID_DATASET, ScoreRecord, classifier_metrics, export_distributions, run_ablation, run_ood_eval, write_scores,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_classifier, train_g0, train_g1
from .uncertainty import UncertaintyMethod

logger = logging.getLogger("drue")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


class MissingDependency(Exception):
    def __init__(self, artifact, run_first):
        super().__init__(f"{artifact} not found")
        self.artifact = str(artifact)
        self.run_first = run_first


class RunDir:
    def __init__(self, cfg: RunConfig):
        self.root = Path(cfg.paths.run_dir)

    @property
    def data(self):
        return self.root / "data"

    def seed_dir(self, seed):
        return self.root / f"seed_{seed}"

    def ckpt(self, seed, stage):
        return self.seed_dir(seed) / f"{stage}.ckpt"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _load_split(run: RunDir):
    if not (run.data / "manifest.csv").is_file():
        raise MissingDependency(run.data / "manifest.csv", "prepare")
    return ds.load_split(run.data)


def _ladder(cfg: RunConfig, split):
    ladder = ds.build_ladder(split.test, cfg.dataset.ladder_kinds, cfg.dataset.ladder_severities, cfg.dataset.seed)
    for directory in cfg.dataset.external_dirs:
        samples = ds.load_external(directory, cfg.dataset.image_size)
        ladder.external.append(ds.Rung(Path(directory).name, "external", None, list(samples)))
    return ladder


def _bundle(run: RunDir, seed: int, stage: str):
    path = run.ckpt(seed, stage)
    if not path.is_file():
        hint = "train --stage all" if stage == "classifier" else f"train --stage {stage}"
        raise MissingDependency(path, f"{hint} --seed {seed}")
    return load_checkpoint(path)


def _mc_params(cfg: RunConfig) -> dict:
    return {"n_passes": cfg.eval.mc_passes, "dropout_rate": cfg.eval.mc_dropout_rate}


# -- commands -----------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, args) -> dict:
    run = RunDir(cfg)
    split = ds.generate_synthetic(cfg.dataset.n_per_class, cfg.dataset.image_size, cfg.dataset.seed)
    manifest = ds.save_split(split, run.data)
    return {"manifest": str(manifest), "train": len(split.train), "val": len(split.val), "test": len(split.test)}


def _history(run: RunDir, seed: int, bundle) -> None:
    _write_json(run.seed_dir(seed) / "history.json", {"stages": bundle.stages, "history": bundle.history,
                                                      "freeze_report": bundle.freeze_report})


def cmd_train(cfg: RunConfig, args) -> dict:
    run = RunDir(cfg)
    split = _load_split(run)
    stages = ["classifier", "g1", "g0"] if args.stage == "all" else [args.stage]
    encoder = cfg.encoder_config()
    out = {}
    for seed in cfg.eval.seeds:
        torch.manual_seed(seed)
        bundle = None
        for stage in stages:
            tc = cfg.train_config(stage, seed)
            if stage == "classifier":
                bundle = train_classifier(split, tc, encoder)
            elif stage == "g1":
                bundle = bundle or _bundle(run, seed, "classifier")
                bundle = train_g1(bundle, split, tc)
            else:
                freeze = cfg.training.g0.freeze
                bundle = bundle or _bundle(run, seed, "g1" if freeze else "classifier")
                if freeze and not bundle.has("g1"):
                    raise MissingDependency(run.ckpt(seed, "g1"), f"train --stage g1 --seed {seed}")
                bundle = train_g0(bundle, split, tc, freeze=freeze)
            save_checkpoint(bundle, run.ckpt(seed, stage))
            _history(run, seed, bundle)
        out[seed] = {"stages": bundle.stages, "freeze_report": bundle.freeze_report}
    return {"seeds": out}


def _method(name: str, cfg: RunConfig, seed: int) -> UncertaintyMethod:
    return UncertaintyMethod(name, {**_mc_params(cfg), "seed": seed} if name == "mc_dropout" else {})


def cmd_score(cfg: RunConfig, args) -> dict:
    run = RunDir(cfg)
    split = _load_split(run)
    ladder = _ladder(cfg, split)
    if args.dataset == ID_DATASET:
        samples, is_ood = split.test, False
    else:
        try:
            samples, is_ood = ladder[args.dataset].samples, True
        except KeyError:
            raise ConfigurationError(
                f"unknown dataset {args.dataset!r}; choose from {[ID_DATASET, *ladder.names()]}"
            ) from None
    written = []
    for seed in cfg.eval.seeds:
        method = _method(args.method, cfg, seed)
        bundle = _bundle(run, seed, "g0" if "g0" in method.required_stages() else "classifier")
        scores = method(ds.stack_images(samples), bundle)
        records = [ScoreRecord(s.sample_id, args.dataset, args.method, float(v), is_ood) for s, v in zip(samples, scores)]
        path = run.root / "scores" / f"score_{args.method}_{args.dataset}_seed{seed}.csv"
        written.append(str(write_scores(records, path)))
    return {"written": written}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    run = RunDir(cfg)
    split = _load_split(run)
    ladder = _ladder(cfg, split)
    bundles = {seed: _bundle(run, seed, "g0") for seed in cfg.eval.seeds}
    report = run_ood_eval(
        bundles, ladder, list(cfg.eval.methods), split.test, score_dir=run.root / "scores",
        config=cfg.model_dump(exclude={"paths"}), method_params={"mc_dropout": _mc_params(cfg)},
    )
    (run.root / "report.json").write_text(report.to_json())
    score_files = [run.root / "scores" / f"seed_{s}.csv" for s in cfg.eval.seeds]
    _write_json(run.root / "histograms.json", export_distributions(score_files, cfg.eval.n_bins))
    sanity = {str(s): classifier_metrics(b, split.test) for s, b in bundles.items()}
    _write_json(run.root / "classifier.json", sanity)
    return {"report": str(run.root / "report.json"), "errors": report.errors}


def cmd_ablate(cfg: RunConfig, args) -> dict:
    run = RunDir(cfg)
    split = _load_split(run)
    ladder = _ladder(cfg, split)
    bundles = {seed: _bundle(run, seed, "g0") for seed in cfg.eval.seeds}
    table = run_ablation(split, ladder, bundles, cfg.train_config("g0", cfg.eval.seeds[0]))
    _write_json(run.root / "ablation.json", table)
    return {"ablation": str(run.root / "ablation.json"),
            "auc": {r["row"]: round(r["auc"]["mean"], 4) for r in table["rows"]}}


def cmd_theory(cfg: RunConfig, args) -> dict:
    from . import theory

    run = RunDir(cfg)
    split = _load_split(run)
    seed = cfg.eval.seeds[0]
    bundle = _bundle(run, seed, "g0")
    scales = args.scales or cfg.theory.scales
    X = ds.stack_images(split.test[: cfg.theory.n_images])

    probe = theory.probe_from_bundle(X, bundle, scales)
    trained = theory.residual_scaling_exponent(probe, bundle.decoder)
    g0 = cfg.training.g0
    smooth_cfg = TrainConfig(learning_rate=g0.learning_rate, batch_size=g0.batch_size,
                             max_epochs=cfg.theory.smooth_epochs, patience=cfg.theory.smooth_epochs, seed=seed)
    smooth = theory.train_smooth_pair(bundle, split, smooth_cfg, cfg.theory.smooth_activation)
    smooth_scaling = theory.residual_scaling_exponent(theory.probe_from_bundle(X, smooth, scales), smooth.decoder)
    gaps = theory.drue_vs_jvp_check(X, bundle, cfg.theory.gap_scales)
    quadratic = theory.taylor_residual(torch.tensor([1.0]), torch.tensor([1.0]), 0.1, lambda z: z**2)
    result = {
        "seed": seed,
        "trained_decoder": trained.to_dict(),
        "smooth_decoder": {"activation": cfg.theory.smooth_activation, "epochs": cfg.theory.smooth_epochs,
                           **smooth_scaling.to_dict()},
        "drue_vs_jvp": [vars(g) for g in gaps],
        "gap_monotone": theory.gap_is_monotone(gaps),
        "quadratic_toy_residual": quadratic,
    }
    _write_json(run.root / "theory.json", result)
    return {"theory": str(run.root / "theory.json"), "smooth_slope": smooth_scaling.slope,
            "trained_slope": trained.slope, "gap_monotone": result["gap_monotone"]}


def cmd_plot(cfg: RunConfig, args) -> dict:
    from . import plotting

    run = RunDir(cfg)
    if not (run.root / "report.json").is_file():
        raise MissingDependency(run.root / "report.json", "evaluate")
    split = _load_split(run)
    bundle = _bundle(run, cfg.eval.seeds[0], "g0")
    ladder = _ladder(cfg, split)
    written = plotting.plot_run(run.root, bundle, split, ladder)
    return {"written": [str(p) for p in written]}


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "theory": cmd_theory,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--run-dir", type=Path, help="override paths.run_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="drue", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="generate the synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train classifier / G1 / G0")
    p.add_argument("--stage", choices=["all", "classifier", "g1", "g0"], default="all")
    p = sub.add_parser("score", parents=[common], help="write a ScoreRecord CSV for one method and dataset")
    p.add_argument("--method", choices=["drue", "rue", "entropy", "mc_dropout"], required=True)
    p.add_argument("--dataset", default=ID_DATASET, help="'id' or a ladder rung name")
    sub.add_parser("evaluate", parents=[common], help="OOD report across the ladder")
    sub.add_parser("ablate", parents=[common], help="four-configuration decoder ablation")
    p = sub.add_parser("theory", parents=[common], help="Taylor remainder checks")
    p.add_argument("--scales", type=float, nargs="+")
    p = sub.add_parser("plot", parents=[common], help="render figures from a finished run")
    p.add_argument("plot_run_dir", nargs="?", type=Path, help="run directory (overrides the config)")
    sub.add_parser("default-config", help="print the default config as YAML")
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "default-config":
        print(RunConfig().to_yaml(), end="")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        run_dir = getattr(args, "plot_run_dir", None) or args.run_dir
        if run_dir is not None:
            overrides["paths.run_dir"] = str(run_dir)
        cfg = load_config(args.config, overrides)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigurationError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))

    root = Path(cfg.paths.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(root / ".lock"), timeout=0)
    try:
        with lock:
            (root / "config.snapshot").write_text(cfg.to_yaml())
            result = COMMANDS[args.command](cfg, args)
    except Timeout:
        return _fail(EXIT_RUNTIME, "locked", f"run directory {root} is in use by another command")
    except MissingDependency as exc:
        return _fail(EXIT_DEPENDENCY, "missing_dependency", str(exc), run_first=f"drue {exc.run_first}")
    except (ConfigurationError, ContractViolation) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except Exception as exc:  # noqa: BLE001
        logger.debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
