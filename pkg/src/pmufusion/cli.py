"""Command-line entry point: ``pmufusion <subcommand> [options]``.

Every subcommand reads an optional TOML config (``--config``) whose sections
mirror the library's config dataclasses; flags given on the command line win
over the file. Outputs are written under ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import decision, envelope, evaluation, windows
from .classifier import ClassifierConfig, load_classifier, save_classifier
from .data import SyntheticConfig, generate_synthetic, read_dataset, write_dataset
from .fusion import run_pipeline, write_report
from .system import (
    FittedSystem,
    SystemConfig,
    _stack,
    calibration_data,
    fit_classifier_stage,
    scene_outputs,
    train_vaegan_stage,
    tune_stage,
)
from .vaegan import LossWeights, TrainConfig, load_model, save_model, write_history

log = logging.getLogger("pmufusion")

SUBCOMMANDS = ("generate", "train-vaegan", "train-classifier", "tune", "detect", "run", "ablate", "evaluate")
RULES = ("threshold", "hull", "envelope")

# module names reported when a component fails
_MODULES = {
    "pmufusion.data": "pmu_data",
    "pmufusion.nn": "nn_core",
    "pmufusion.vaegan": "vaegan",
    "pmufusion.decision": "decision",
    "pmufusion.classifier": "classifier",
    "pmufusion.windows": "windows",
    "pmufusion.fusion": "fusion",
    "pmufusion.envelope": "baseline_envelope",
    "pmufusion.evaluation": "eval",
    "pmufusion.system": "system",
}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    synthetic: SyntheticConfig = dataclasses.field(default_factory=SyntheticConfig)
    system: SystemConfig = dataclasses.field(default_factory=SystemConfig)
    window_seconds: float | None = None
    stride_seconds: float | None = None
    eta_detection: int | None = None
    rule: str = "hull"
    threads: int = os.cpu_count() or 1


def _apply(obj, table: dict, section: str, skip=()):
    """Set dataclass fields from a TOML table, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in table.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        current = getattr(obj, key)
        if isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {key} must be an array")
            value = tuple(value)
        elif isinstance(current, bool) or isinstance(value, bool):
            if not isinstance(value, bool) or not isinstance(current, bool):
                raise ConfigError(f"[{section}] {key} has the wrong type")
        elif isinstance(current, float) and isinstance(value, (int, float)):
            value = float(value)
        elif current is not None and type(value) is not type(current):
            raise ConfigError(f"[{section}] {key} must be {type(current).__name__}")
        setattr(obj, key, value)


def _sub_section(system: SystemConfig, table: dict, section: str, prefix: str):
    """Map ``[threshold] grid_size`` onto ``SystemConfig.threshold_grid_size`` and so on."""
    for key in table:
        if not hasattr(system, prefix + key):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
    _apply(system, {prefix + k: v for k, v in table.items()}, section)


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {"synthetic", "model", "train", "classifier", "window", "identification",
             "threshold", "envelope", "run"}
    for section in raw:
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    syn = dict(raw.get("synthetic", {}))
    counts = syn.pop("counts", None)
    signatures = syn.pop("signatures", None)
    _apply(cfg.synthetic, syn, "synthetic")
    if counts is not None:
        cfg.synthetic.counts = {int(k): int(v) for k, v in counts.items()}
    if signatures is not None:
        for kind, params in signatures.items():
            spec = cfg.synthetic.signatures.setdefault(int(kind), {})
            for name, rng in params.items():
                lo, hi = rng
                spec[name] = (float(lo), float(hi))

    model = raw.get("model", {})
    for key in model:
        if key not in ("hidden", "latent_dim", "disc_hidden", "model_seed", "calibration_fraction",
                       "hull_inflation", "max_train_windows"):
            raise ConfigError(f"unknown key {key!r} in [model]")
    _apply(cfg.system, model, "model")
    _sub_section(cfg.system, raw.get("threshold", {}), "threshold", "threshold_")
    _sub_section(cfg.system, raw.get("envelope", {}), "envelope", "envelope_")
    train = dict(raw.get("train", {}))
    lam = {k: train.pop(k) for k in ("lambda1", "lambda2") if k in train}
    _apply(cfg.system.train, train, "train")
    if lam:
        w = cfg.system.train.weights
        cfg.system.train.weights = LossWeights(float(lam.get("lambda1", w.lambda1)),
                                               float(lam.get("lambda2", w.lambda2)))
    _apply(cfg.system.classifier, raw.get("classifier", {}), "classifier")

    win = raw.get("window", {})
    for key in win:
        if key not in ("window_seconds", "stride_seconds"):
            raise ConfigError(f"unknown key {key!r} in [window]")
    cfg.window_seconds = win.get("window_seconds")
    cfg.stride_seconds = win.get("stride_seconds")

    ident = raw.get("identification", {})
    for key in ident:
        if key not in ("eta", "eta_detection"):
            raise ConfigError(f"unknown key {key!r} in [identification]")
    if "eta" in ident:
        cfg.system.eta = int(ident["eta"])
    cfg.eta_detection = ident.get("eta_detection")

    run = raw.get("run", {})
    for key in run:
        if key not in ("rule", "threads"):
            raise ConfigError(f"unknown key {key!r} in [run]")
    cfg.rule = run.get("rule", cfg.rule)
    cfg.threads = int(run.get("threads", cfg.threads))
    return cfg


def resolve(args) -> RunConfig:
    """Config file first, then command-line flags on top."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.synthetic.seed = args.seed
        cfg.system.train.seed = args.seed
        cfg.system.model_seed = args.seed
        cfg.system.classifier.seed = args.seed
    if args.eta is not None:
        cfg.system.eta = args.eta
    if args.window_s is not None:
        cfg.window_seconds = args.window_s
    if args.stride_s is not None:
        cfg.stride_seconds = args.stride_s
    if args.rule is not None:
        cfg.rule = args.rule
    if args.threads is not None:
        cfg.threads = args.threads
    if cfg.rule not in RULES:
        raise ConfigError(f"rule must be one of {', '.join(RULES)}")
    if cfg.system.eta < 1:
        raise ConfigError("eta must be >= 1")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


# -- helpers ----------------------------------------------------------------

def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    for name in names:
        path = Path(getattr(args, name))
        if name == "data":
            if not (path / "dataset.txt").is_file():
                raise UsageError(f"--data {path} is not a dataset directory (no dataset.txt)")
        elif not path.is_file():
            raise UsageError(f"--{name} {path} does not exist")


def _dataset(args, cfg: RunConfig):
    ds = read_dataset(args.data)
    changes = {}
    if cfg.window_seconds is not None:
        changes["window_seconds"] = cfg.window_seconds
    if cfg.stride_seconds is not None:
        changes["stride_seconds"] = cfg.stride_seconds
    if changes:
        ds.config = dataclasses.replace(ds.config, **changes)
    return ds


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _detector_dir(args) -> Path:
    if args.detectors is not None:
        return Path(args.detectors)
    return Path(args.model).parent


def _load_system(args, cfg: RunConfig, ds, need_classifier: bool = True) -> FittedSystem:
    from .system import window_config_for

    model = load_model(args.model)
    wcfg = window_config_for(ds)
    if model.window_samples != wcfg.window_frames:
        raise UsageError(f"model expects {model.window_samples}-sample windows, data gives {wcfg.window_frames}")
    ddir = _detector_dir(args)
    hull = rule = env = None
    if (ddir / "hull.csv").exists():
        hull = decision.load_hull(ddir / "hull.csv")
    if (ddir / "threshold.txt").exists():
        rule = decision.load_rule(ddir / "threshold.txt")
    if (ddir / "envelope.txt").exists():
        env = envelope.EnvelopeDetector(envelope.load_envelope(ddir / "envelope.txt"))
    needed = {"hull": hull, "threshold": rule, "envelope": env}[cfg.rule]
    if needed is None:
        raise UsageError(f"no tuned {cfg.rule} detector in {ddir}; run `tune` first or pass --detectors")
    clf = None
    if need_classifier:
        _require(args, "classifier")
        clf = load_classifier(args.classifier)
    return FittedSystem(model, clf, hull, rule, env, wcfg, cfg.system.eta)


def _eval_scenes(ds, args):
    scenes = ds.split("eval")
    if getattr(args, "scene", None) is not None:
        scenes = [s for s in ds.scenes if s.index == args.scene]
        if not scenes:
            raise UsageError(f"no scene with index {args.scene}")
    return scenes


# -- subcommands -------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> None:
    syn = cfg.synthetic
    if cfg.window_seconds is not None:
        syn.window_seconds = cfg.window_seconds
    if cfg.stride_seconds is not None:
        syn.stride_seconds = cfg.stride_seconds
    ds = generate_synthetic(syn)
    written = write_dataset(ds, _out(args))
    log.info("wrote %d files, scenes %s", len(written), ds.label_histogram())


def cmd_train_vaegan(args, cfg: RunConfig) -> None:
    _require(args, "data")
    ds = _dataset(args, cfg)
    model, history = train_vaegan_stage(ds, cfg.system)
    out = _out(args)
    save_model(model, out / "vaegan.ckpt")
    write_history(out / "history.csv", history)
    log.info("trained %d epochs, best val_recon %.6g", len(history), min(h.val_recon for h in history))


def cmd_train_classifier(args, cfg: RunConfig) -> None:
    _require(args, "data", "model")
    ds = _dataset(args, cfg)
    model = load_model(args.model)
    cal = calibration_data(model, ds, cfg.system, cfg.threads)
    clf = fit_classifier_stage(cal, cfg.system)
    out = _out(args)
    save_classifier(clf, out / "classifier.ckpt")
    feats, labels = cal.features()
    _, report = evaluation.score(clf.predict(feats), labels, 5, "training", "segment")
    (out / "classifier_training.txt").write_text(evaluation.format_report(report))


def cmd_tune(args, cfg: RunConfig) -> None:
    _require(args, "data", "model")
    ds = _dataset(args, cfg)
    model = load_model(args.model)
    cal = calibration_data(model, ds, cfg.system, cfg.threads)
    hull, rule, env = tune_stage(cal, cfg.system, ds.config.frame_rate)
    out = _out(args)
    decision.save_hull(hull, out / "hull.csv")
    decision.save_rule(rule, out / "threshold.txt")
    envelope.save_envelope(env.config, out / "envelope.txt")
    feats, labels = cal.features()
    scores = rule.score(feats)
    grid = np.linspace(0.0, float(np.quantile(scores, 0.99)), cfg.system.threshold_grid_size)
    acc = decision.accuracy_curve(scores, labels, grid)
    with (out / "threshold_curve.csv").open("w") as fh:
        fh.write("eta1,accuracy\n")
        for g, a in zip(grid, acc):
            fh.write(f"{g!r},{a!r}\n")


def cmd_detect(args, cfg: RunConfig) -> None:
    _require(args, "data", "model")
    ds = _dataset(args, cfg)
    system = _load_system(args, cfg, ds, need_classifier=False)
    out = _out(args)
    detector = system.detector(cfg.rule)
    hits, total = 0, 0
    for sc in _eval_scenes(ds, args):
        from .system import scene_windows

        w = scene_windows(ds, sc, system.window)
        e = windows.compute_errors(system.model, w, cfg.threads)
        P, S = e.shape[:2]
        flags = np.asarray(detector.flags(e.reshape(P * S, 2), w.reshape(P * S, *w.shape[2:]))).reshape(P, S)
        starts = sc.start + np.arange(S) * system.window.stride_seconds
        windows.write_matrix_csv(out / f"detection_{sc.index:04d}.csv", flags, starts)
        windows.write_pgm(out / f"detection_{sc.index:04d}.pgm", flags)
        truth = ds.segment_labels(sc) > 0
        hits += int(np.sum(flags.astype(bool) == truth[None, :]))
        total += flags.size
    acc = hits / total if total else 0.0
    (out / "detection_summary.txt").write_text(f"rule = {cfg.rule}\ncells = {total}\naccuracy = {acc!r}\n")


def cmd_run(args, cfg: RunConfig) -> None:
    _require(args, "data", "model", "classifier")
    ds = _dataset(args, cfg)
    system = _load_system(args, cfg, ds)
    out = _out(args)
    detector = system.detector(cfg.rule)
    scenes = _eval_scenes(ds, args)
    rows = []
    if not scenes:
        # raw recording: the whole stream is one analysis window
        spans = [(None, 0.0, min(s.duration for s in ds.streams))]
    else:
        spans = [(sc, sc.start, sc.start + sc.duration) for sc in scenes]
    for sc, a, b in spans:
        tag = "all" if sc is None else f"{sc.index:04d}"
        streams = [s.slice_seconds(a, b) for s in ds.streams]
        res = run_pipeline(streams, system.model, detector, system.classifier, system.window,
                           cfg.system.eta, cfg.threads, cfg.eta_detection)
        paths = {
            "detection_csv": f"detection_{tag}.csv",
            "detection_pgm": f"detection_{tag}.pgm",
            "classification_csv": f"classification_{tag}.csv",
            "classification_ppm": f"classification_{tag}.ppm",
        }
        windows.write_matrix_csv(out / paths["detection_csv"], res.detection.values, res.detection.starts)
        windows.write_pgm(out / paths["detection_pgm"], res.detection.values)
        windows.write_matrix_csv(out / paths["classification_csv"], res.classification.values,
                                 res.classification.starts)
        windows.write_ppm(out / paths["classification_ppm"], res.classification.values)
        write_report(out / f"report_{tag}.json", res, paths)
        rows.append((tag, "" if sc is None else sc.label, res.final.value))
    with (out / "summary.csv").open("w") as fh:
        fh.write("scene,truth,final_label\n")
        for tag, truth, final in rows:
            fh.write(f"{tag},{truth},{final}\n")


def cmd_ablate(args, cfg: RunConfig) -> None:
    _require(args, "data", "model", "classifier")
    ds = _dataset(args, cfg)
    system = _load_system(args, cfg, ds)
    outs = scene_outputs(system, ds, _eval_scenes(ds, args), cfg.rule, cfg.threads)
    reports = evaluation.run_ablation(outs, cfg.system.eta)
    out = _out(args)
    (out / "ablation.txt").write_text("".join(evaluation.format_report(r) + "\n" for r in reports.values()))
    evaluation.write_reports_csv(out / "ablation.csv", reports)
    for name, r in reports.items():
        evaluation.write_confusion_ppm(out / f"confusion_{name}.ppm", r.confusion)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    """Window-level scores on the evaluation split: detection per rule and classification."""
    _require(args, "data", "model", "classifier")
    ds = _dataset(args, cfg)
    system = _load_system(args, cfg, ds)
    x, y = _stack(_eval_scenes(ds, args), ds, system.window)
    if x.ndim < 3:
        raise UsageError("no evaluation windows in the dataset")
    e = windows.compute_errors(system.model, x[None], cfg.threads)[0]
    out = _out(args)
    lines, summary = [], {}
    for name in RULES:
        det = system.detector(name)
        if det is None:
            continue
        flags = np.asarray(det.flags(e, x))
        _, r = evaluation.score(flags, (y > 0).astype(np.int64), 2, f"detection-{name}", "segment")
        lines.append(evaluation.format_report(r))
        summary[f"detection_accuracy_{name}"] = r.accuracy
    known = y < 5
    _, r = evaluation.score(system.classifier.predict(e[known]), y[known], 5, "classification", "segment")
    lines.append(evaluation.format_report(r))
    summary["classification_accuracy_known"] = r.accuracy
    (out / "evaluation.txt").write_text("\n".join(lines))
    (out / "evaluation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


COMMANDS = {
    "generate": cmd_generate,
    "train-vaegan": cmd_train_vaegan,
    "train-classifier": cmd_train_classifier,
    "tune": cmd_tune,
    "detect": cmd_detect,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmufusion", description="PMU event detection and classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--rule", choices=RULES)
        p.add_argument("--eta", type=int)
        p.add_argument("--window-s", type=float, dest="window_s")
        p.add_argument("--stride-s", type=float, dest="stride_s")
        p.add_argument("--threads", type=int)
        p.add_argument("--out", default=".")
        p.add_argument("--data")
        p.add_argument("--model")
        p.add_argument("--classifier")
        p.add_argument("--detectors", help="directory with hull.csv / threshold.txt / envelope.txt")
        p.add_argument("--scene", type=int, help="process only this scene index")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # component failure
        module = _MODULES.get(type(exc).__module__)
        if module is None:
            tb = exc.__traceback__
            while tb is not None:
                module = _MODULES.get(tb.tb_frame.f_globals.get("__name__"), module)
                tb = tb.tb_next
        print(f"{parser.prog} {args.command}: [{module or 'unknown'}] {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
