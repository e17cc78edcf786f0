"""
Command-line entry point: `python -m src.cli.main <command> [flags]`.

Every command prints exactly one JSON result line as its last stdout line,
{"statusCode": 200, "command": ..., ...} on success or
{"statusCode": 4xx/5xx, "command": ..., "error": ..., "message": ...} on failure,
and exits non-zero unless the status is 200.
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import orjson

from src.core.checkpoint import CheckpointError
from src.dataio.loader import load_dataset
from src.dataio.manifest import DatasetError, SynthSceneSpec
from src.dataio.synthetic import generate_synthetic
from src.dataio.track import load_track
from src.fusion.compositor import render_sequence
from src.fusion.model import TalkingHeadModel
from src.rasterizer.settings import DEFAULT_WORKERS, RasterSettings
from src.trainer.ablation import run_decomposition_ablation
from src.trainer.config import TrainSchedule, load_schedule
from src.trainer.stages import STAGES, DivergenceError, evaluate, train_all
from src.verification.gradcheck import SUITES, run_gradcheck
from src.verification.oracle import oracle_check


class CliUsageError(ValueError):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    """Raises instead of printing usage and exiting, so usage errors get a JSON line too."""

    def error(self, message: str):
        raise CliUsageError(message)


def _ok(command: str, **body) -> Dict[str, Any]:
    return {"statusCode": 200, "command": command, **body}


def _schedule(args) -> TrainSchedule:
    schedule = load_schedule(
        getattr(args, "config", None),
        seed=getattr(args, "seed", None),
        precision=getattr(args, "precision", None),
    )
    raster = schedule.raster.model_copy(update={"workers": args.workers})
    return schedule.model_copy(update={"raster": raster, "verbose": not args.quiet})


# --- handlers ---------------------------------------------------------------

def handle_synth(args) -> Dict[str, Any]:
    spec = SynthSceneSpec.from_file(args.spec) if args.spec else SynthSceneSpec()
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    manifest = generate_synthetic(spec, Path(args.out), verbose=not args.quiet)
    return _ok("synth", out=str(args.out), frames=manifest.frame_count, train=len(manifest.train), test=len(manifest.test))


def handle_train(args) -> Dict[str, Any]:
    schedule = _schedule(args)
    dataset = load_dataset(Path(args.data), workers=args.workers)
    model = None
    if args.stage in ("motion", "finetune"):
        model = TalkingHeadModel.load(Path(args.init or args.out))
        if model.single_branch != args.single_branch:
            raise ValueError("--single-branch does not match the checkpoint being resumed")
    result = train_all(dataset, schedule, Path(args.out), stage=args.stage, single_branch=args.single_branch, model=model)
    last = result.records[-1] if result.records else {}
    return _ok(
        "train",
        out=str(args.out),
        stage=args.stage,
        primitives=result.model.primitive_counts(),
        final_loss=last.get("loss"),
        log=str(result.log_path) if result.log_path else None,
    )


def handle_render(args) -> Dict[str, Any]:
    model = TalkingHeadModel.load(Path(args.ckpt))
    config = model.face.motion.config
    track = load_track(Path(args.track), config.audio_dim, config.expr_dim)
    result = render_sequence(
        model,
        track.cameras,
        track.conditions,
        settings=RasterSettings(workers=args.workers),
        out_dir=Path(args.out),
        emit_alpha=args.emit_alpha,
        workers=args.frame_workers,
        verbose=not args.quiet,
    )
    return _ok("render", out=str(args.out), frames=len(result.colors))


def handle_eval(args) -> Dict[str, Any]:
    model = TalkingHeadModel.load(Path(args.ckpt))
    dataset = load_dataset(Path(args.data), workers=args.workers)
    result = evaluate(
        model,
        dataset,
        args.split,
        out_dir=Path(args.out) if args.out else None,
        workers=args.frame_workers,
        verbose=not args.quiet,
    )
    return _ok("eval", split=args.split, **result.summary)


def handle_gradcheck(args) -> Dict[str, Any]:
    modules = [args.module] if args.module else list(SUITES)
    results = run_gradcheck(modules, args.precision, configs=args.configs, samples=args.samples, seed=args.seed or 0)
    failed = [r.to_dict() for r in results if not r.passed]
    if not args.quiet:
        for r in results:
            print(f"{'✅' if r.passed else '❌'} {r.suite}:{r.parameter} max rel error {r.max_rel_error:.2e} over {r.checked} entries")
    body = {"precision": args.precision, "checks": [r.to_dict() for r in results]}
    if failed:
        return {"statusCode": 422, "command": "gradcheck", "error": "GradientMismatch",
                "message": f"{len(failed)} gradient checks exceeded tolerance", **body}
    return _ok("gradcheck", **body)


def handle_oracle(args) -> Dict[str, Any]:
    report = oracle_check(
        scenes=args.scenes,
        seed=args.seed or 0,
        max_primitives=args.max_primitives,
        size=args.size,
        workers=args.workers,
        verbose=not args.quiet,
    )
    if not report.passed:
        return {"statusCode": 422, "command": "oracle-check", "error": "OracleMismatch",
                "message": f"{len(report.failures)} scenes exceed tolerance", **report.to_dict()}
    return _ok("oracle-check", **report.to_dict())


def handle_ablation(args) -> Dict[str, Any]:
    schedule = _schedule(args)
    dataset = load_dataset(Path(args.data), workers=args.workers)
    report = run_decomposition_ablation(dataset, schedule, Path(args.out))
    return _ok("ablation", **report)


HANDLERS: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
    "synth": handle_synth,
    "train": handle_train,
    "render": handle_render,
    "eval": handle_eval,
    "gradcheck": handle_gradcheck,
    "oracle-check": handle_oracle,
    "ablation": handle_ablation,
}


def build_parser() -> JsonArgumentParser:
    parser = JsonArgumentParser(prog="gauss-talk", description="Deformable Gaussian talking-head engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--workers", type=int, default=DEFAULT_WORKERS, help="tile worker threads")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true", help="only print the JSON result line")
        return p

    p = command("synth", "generate a synthetic talking-head dataset")
    p.add_argument("--spec", type=Path, default=None, help="scene spec JSON (defaults if omitted)")
    p.add_argument("--out", type=Path, required=True)

    p = command("train", "train a model on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--config", type=Path, default=None, help="training schedule JSON")
    p.add_argument("--init", type=Path, default=None, help="checkpoint to resume (defaults to --out)")
    p.add_argument("--precision", choices=["single", "double"], default=None)
    p.add_argument("--single-branch", action="store_true", help="one deformable field, no face/mouth split")

    p = command("render", "render a driving track")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--track", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--emit-alpha", action="store_true", help="also write the face opacity per frame as raw little-endian float32")
    p.add_argument("--frame-workers", type=int, default=1)

    p = command("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--out", type=Path, default=None, help="write rendered frames and metrics here")
    p.add_argument("--frame-workers", type=int, default=1)

    p = command("gradcheck", "finite-difference gradient checks")
    p.add_argument("--module", choices=SUITES, default=None)
    p.add_argument("--precision", choices=["single", "double"], default="double")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--samples", type=int, default=20, help="entries checked per tensor and configuration")

    p = command("oracle-check", "tile renderer vs. naive compositor")
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--max-primitives", type=int, default=200)
    p.add_argument("--size", type=int, default=64)

    p = command("ablation", "two-branch vs. single-branch comparison")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--precision", choices=["single", "double"], default=None)
    return parser


def _error(command: Optional[str], status: int, error: Exception) -> Dict[str, Any]:
    return {"statusCode": status, "command": command, "error": type(error).__name__, "message": str(error)}


def run(argv: Optional[List[str]] = None) -> Dict[str, Any]:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        return HANDLERS[command](args)
    except CliUsageError as e:
        return _error(command, 400, e)
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        return _error(command, 404 if isinstance(e, FileNotFoundError) else 400, e)
    except DivergenceError as e:
        return _error(command, 500, e)
    except ValueError as e:
        return _error(command, 400, e)
    except Exception as e:
        return _error(command, 500, e)


def main(argv: Optional[List[str]] = None) -> int:
    result = run(argv)
    sys.stdout.write(orjson.dumps(result, option=orjson.OPT_SERIALIZE_NUMPY).decode() + "\n")
    return 0 if result["statusCode"] == 200 else 1


if __name__ == "__main__":
    sys.exit(main())
