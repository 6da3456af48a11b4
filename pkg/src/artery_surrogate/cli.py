"""``artery-surrogate`` command line.

Exit codes: 0 success, 2 partial success (some solves failed), 1 error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .geometry import GeometryError
from .pipeline import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, PipelineConfig, PipelineError

logger = logging.getLogger("artery_surrogate")


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON pipeline configuration")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="worker processes for per-sample stages")
    parser.add_argument("--out", help=f"run directory (default ${pipeline.OUT_ENV} or ./artery_runs)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artery-surrogate",
                                     description="Artery wall FEM dataset and surrogate models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample random geometries")
    p.add_argument("--count", type=int)
    _common(p)

    p = sub.add_parser("solve", help="run the finite element solves")
    p.add_argument("--pressure", type=float, help="lumen pressure override in kPa")
    _common(p)

    p = sub.add_parser("dataset", help="rasterize, augment and split solved samples")
    _common(p)

    p = sub.add_parser("train", help="train a surrogate")
    p.add_argument("--target", choices=pipeline.TARGETS, default="stress")
    p.add_argument("--model", choices=("unet", "cgan"), default="unet")
    p.add_argument("--ensemble", choices=("same-arch-dropouts", "two-arch-dropouts"))
    p.add_argument("--transfer-from", type=Path, help="checkpoint to initialize from")
    p.add_argument("--name", help="model directory name under models/")
    _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint, ensemble spec or 'baseline'")
    p.add_argument("model", help="checkpoint, ensemble.json, model directory, or 'baseline'")
    p.add_argument("--target", choices=pipeline.TARGETS, default="stress")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--name")
    _common(p)

    p = sub.add_parser("predict", help="predict field maps for specs or label maps")
    p.add_argument("model")
    p.add_argument("inputs", nargs="+", type=Path, help="geometry .json, label .npy or .f32")
    p.add_argument("--target", default="field", help="tag used in output names")
    _common(p)

    p = sub.add_parser("report", help="summarize evaluations and transfer runs")
    _common(p)
    return parser


def _config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    if getattr(args, "count", None) is not None:
        overrides["count"] = args.count
    cfg = PipelineConfig.load(args.config, **overrides)
    if getattr(args, "pressure", None) is not None:
        cfg.data["load_case"] = dict(cfg.data["load_case"], lumen_pressure=args.pressure)
        cfg.validate()
    return cfg


def _setup_logging(cfg, command, verbose):
    (cfg.out / "logs").mkdir(parents=True, exist_ok=True)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    for handler in (logging.StreamHandler(sys.stderr),
                    logging.FileHandler(cfg.out / "logs" / f"{command}.log")):
        handler.setFormatter(fmt)
        logger.addHandler(handler)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (PipelineError, GeometryError, ValueError, TypeError, OSError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _setup_logging(cfg, args.command, args.verbose)
    cfg.write_resolved()
    try:
        if args.command == "generate":
            pipeline.run_generate(cfg)
        elif args.command == "solve":
            result = pipeline.run_solve(cfg)
            if result["failures"]:
                logger.warning("%d solve(s) failed; see solutions/failures.json",
                               len(result["failures"]))
                return EXIT_PARTIAL
        elif args.command == "dataset":
            result = pipeline.run_dataset(cfg)
            print(json.dumps({k: v for k, v in result.items() if k != "excluded"}))
        elif args.command == "train":
            pipeline.run_train(cfg, args.target, args.model, args.ensemble, args.transfer_from,
                               args.name)
        elif args.command == "evaluate":
            report = pipeline.run_evaluate(cfg, args.model, args.target, args.name, args.split)
            print(json.dumps({"model": report.model_id, "mean_ssim": report.mean_ssim,
                              "mean_mse": report.mean_mse, "samples": len(report.rows)}))
        elif args.command == "predict":
            pipeline.run_predict(cfg, args.model, args.inputs, args.target)
        elif args.command == "report":
            pipeline.run_report(cfg)
    except Exception as exc:  # noqa: BLE001 - top-level handler maps every failure to exit 1
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
