"""Command line interface: ``qmcl generate | train | predict | report``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .estimator import StageError
from .pipeline import (
    GENERATION_KEYS,
    PredictionReport,
    RunConfig,
    TrainingSet,
    export_report,
    generate_training_data,
    load_model,
    read_json,
    run_prediction,
    save_model,
    train,
)

logger = logging.getLogger("qmcl")


def _parse_list(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x.strip()]

    return parse


def _parse_optional(kind):
    def parse(text):
        return None if text.lower() in ("none", "null", "") else kind(text)

    return parse


_TYPES = {
    "int": int,
    "float": float,
    "str": str,
    "Optional[int]": _parse_optional(int),
    "Optional[float]": _parse_optional(float),
    "List[float]": _parse_list(float),
    "Optional[List[int]]": _parse_optional(_parse_list(int)),
}


def _add_config_flags(parser):
    group = parser.add_argument_group("run configuration (overrides preset and config file)")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f"cfg_{f.name}",
            type=_TYPES[str(f.type)],
            default=None,
            metavar=f.name.upper(),
        )


def build_parser():
    parser = argparse.ArgumentParser(prog="qmcl", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("generate", "simulate training trajectories into RUN_DIR/data"),
        ("train", "fit the closure model into RUN_DIR/model"),
        ("predict", "roll out test trajectories into RUN_DIR/report/predictions"),
        ("report", "export CSV tables into RUN_DIR/report/tables"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run-dir", type=Path, default=None, help="defaults to the configured output_dir")
        p.add_argument("--preset", choices=RunConfig.PRESETS, default=None)
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        if name == "predict":
            p.add_argument("--deltas", type=_parse_list(float), default=None, help="comma-separated test deltas")
        _add_config_flags(p)
    return parser


def resolve_config(args, run_dir: Path | None):
    """Preset < saved run config < --config file < individual flags."""
    values = {}
    if args.preset:
        values = RunConfig.preset(args.preset).to_dict()
    if run_dir is not None and (run_dir / "config.json").exists() and args.command != "generate":
        values.update(read_json(run_dir / "config.json"))
    if args.config is not None:
        values.update(read_json(args.config))
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            values[f.name] = value
    return RunConfig.from_dict(values)


def _prediction_dirs(run_dir):
    root = run_dir / "report" / "predictions"
    return sorted(p for p in root.glob("delta_*") if p.is_dir())


def cmd_generate(config, run_dir, args):
    training = generate_training_data(config)
    config.save(run_dir / "config.json")
    training.save(run_dir / "data", config)
    logger.info(
        "wrote %d trajectories of %d samples to %s",
        len(training.deltas), training.resolved[0].shape[0], run_dir / "data",
    )


def cmd_train(config, run_dir, args):
    try:
        training, meta = TrainingSet.load(run_dir / "data")
    except FileNotFoundError as exc:
        raise StageError("train", f"no training data in {run_dir / 'data'}; run 'generate' first") from exc
    stored = meta["config"]
    mismatched = [k for k in GENERATION_KEYS if stored.get(k) != getattr(config, k)]
    if mismatched:
        raise StageError("train", f"configuration differs from the generated data in {mismatched}")
    model = train(config, training)
    config.save(run_dir / "config.json")
    save_model(model, run_dir / "model", config)
    logger.info("basis of %d functions over %d samples; eps=%.4g eps_cond=%.4g",
                model.basis_.n_basis, model.basis_.n_samples, model.eps_, model.eps_cond_)


def cmd_predict(config, run_dir, args):
    try:
        model = load_model(run_dir / "model")
    except FileNotFoundError as exc:
        raise StageError("predict", f"no model in {run_dir / 'model'}; run 'train' first") from exc
    deltas = args.deltas if args.deltas is not None else config.test_deltas
    for delta in deltas:
        report = run_prediction(config, model, delta)
        out = run_dir / "report" / "predictions" / f"delta_{delta:g}"
        report.save(out)
        config.save(out / "config.json")
        for name, vals in report.rmse().items():
            logger.info("delta=%g %s rmse h=%.4e q=%.4e", delta, name, vals["h"], vals["q"])


def cmd_report(config, run_dir, args):
    dirs = _prediction_dirs(run_dir)
    if not dirs:
        raise StageError("report", f"no predictions under {run_dir / 'report' / 'predictions'}")
    x = config.pair.coarse.centers
    for d in dirs:
        report = PredictionReport.load(d)
        files = export_report(report, run_dir / "report" / "tables" / d.name, x_centers=x)
        logger.info("wrote %d files for %s", len(files), d.name)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "predict": cmd_predict, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_dir = args.run_dir
        if run_dir is None:
            run_dir = Path(resolve_config(args, None).output_dir)
        config = resolve_config(args, run_dir)
        COMMANDS[args.command](config, run_dir, args)
    except StageError as exc:
        print(f"qmcl {args.command}: error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"qmcl {args.command}: error [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
