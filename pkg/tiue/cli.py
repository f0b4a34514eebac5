"""
Command line surface. Every subcommand builds a TiUE instance from the config and runs one stage;
errors escape as exit codes (2 config, 3 checkpoint, 1 anything else).
"""
import argparse
import sys
from pathlib import Path
from typing import List, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from .constant import CONFIG_LOC
from .errors import CheckpointError, ConfigError, TiUEError
from .logs import define_log_level, escape, logger
from .models.config_models import SampleMode
from .tiue import TiUE

EXIT_OK = 0


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help=f"YAML or JSON run config (defaults to {CONFIG_LOC.name} when present)")
    common.add_argument("--run-id", default=None,
                        help="run id used in output names (random by default, fixed for sample)")
    common.add_argument("--verbose", action="store_true", help="print debug logs")

    parser = argparse.ArgumentParser(
        prog="tiue",
        description="Distill a diffusion teacher into a one-pass, loop-free student and sample from it.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train-teacher", parents=[common], formatter_class=fmt, help="train the toy teacher")
    p.add_argument("--out", type=Path, required=True, help="teacher checkpoint to write")
    p.add_argument("--progress", type=Path, default=None, help="CSV of iteration,loss")

    p = sub.add_parser("distill", parents=[common], formatter_class=fmt, help="distill a student from a teacher")
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="student checkpoint to write")
    p.add_argument("--progress", type=Path, default=None, help="CSV of per-iteration losses")

    p = sub.add_parser("sample", parents=[common], formatter_class=fmt, help="generate PPM images")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in SampleMode], default=SampleMode.LOOPFREE_SEQ.value)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--steps", type=int, default=None, help="DDIM step count")
    group.add_argument("--k", type=int, default=None, help="decoder steps of a fresh loop-free plan")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--threads", type=int, default=None, help="worker threads (TIUE_THREADS by default)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--interp", default=None, help="C1,C2,N: N images along the path between two conditions")

    p = sub.add_parser("analyze", parents=[common], formatter_class=fmt,
                       help="feature similarity across steps, or quality against step count")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--hold-latent", action="store_true", help="keep the latent fixed across steps")
    p.add_argument("--quality-steps", type=_int_list, default=None, help="e.g. 2,4,8,15,25,50")
    p.add_argument("--real", type=Path, default=None, help="directory of real PPM images")
    p.add_argument("--samples", type=int, default=500, help="generated images per step count")
    p.add_argument("--embedding", default="pooled", help="pixels, pooled or teacher-encoder (the model itself)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="CSV to write")

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="compare two image directories")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--fake", type=Path, required=True)
    p.add_argument("--embedding", default="pixels", help="pixels, pooled or teacher:CKPT")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--noise-model", type=Path, default=None, help="student checkpoint whose noise to report")
    p.add_argument("--noise-samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="JSON report to write")

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="time the sampling modes")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--threads", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="CSV to write")

    p = sub.add_parser("export-data", parents=[common], formatter_class=fmt, help="write toy images as PPM")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("run", parents=[common], formatter_class=fmt,
                       help="export data, train, distill, sample and evaluate in one go")
    p.add_argument("--out", type=Path, default=None, help="work directory (intermediates/<run id> by default)")
    p.add_argument("--count", type=int, default=500, help="held-out and generated images")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config_path(args: argparse.Namespace) -> Path | None:
    if args.config is not None:
        return args.config
    return CONFIG_LOC if CONFIG_LOC.exists() else None


def dispatch(args: argparse.Namespace):
    kwargs = {"run_id": args.run_id} if args.run_id else {}
    if args.command == "sample" and not args.run_id:
        # file names depend only on the seed unless a run id is given
        kwargs["run_id"] = "sample"
    app = TiUE.from_config(_config_path(args), **kwargs)

    if args.command == "train-teacher":
        return app.train_teacher(args.out, progress=args.progress)
    if args.command == "distill":
        return app.distill(args.teacher, args.out, progress=args.progress)
    if args.command == "sample":
        return app.sample(args.model, args.out, threads=args.threads, mode=args.mode, steps=args.steps, k=args.k,
                          seed=args.seed, count=args.count, interp=args.interp)
    if args.command == "analyze":
        return app.analyze(args.model, args.out, threads=args.threads, steps=args.steps, probes=args.probes,
                           hold_latent=args.hold_latent, quality_steps=args.quality_steps, real=args.real,
                           n_samples=args.samples, embedding=args.embedding, seed=args.seed)
    if args.command == "eval":
        return app.evaluate(args.real, args.fake, args.out, embedding=args.embedding, k=args.k,
                            noise_model=args.noise_model, noise_samples=args.noise_samples, seed=args.seed)
    if args.command == "bench":
        return app.bench(args.model, args.out, k=args.k, threads=args.threads, batch=args.batch,
                         repeats=args.repeats, seed=args.seed)
    if args.command == "export-data":
        return app.export_data(args.out, args.count, seed=args.seed)
    if args.command == "run":
        return app.run(args.out, eval_count=args.count, seed=args.seed)
    raise ConfigError(f"unknown command {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    define_log_level(print_level="DEBUG" if args.verbose else "INFO", name=args.command.replace("-", "_"))

    try:
        dispatch(args)
    except (ValidationError, yaml.YAMLError) as e:
        logger.error(f"Invalid configuration: {escape(e)}")
        return ConfigError.exit_code
    except CheckpointError as e:
        logger.error(f"Checkpoint error: {escape(e)}")
        return e.exit_code
    except TiUEError as e:
        logger.error(f"{type(e).__name__}: {escape(e)}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Run failed: {escape(e)}")
        return TiUEError.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
