"""
Command-line entry point: gen | perturb | infer | train | eval | gradcheck | demo
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from . import __version__
from .config import RunConfig, load_config, tiny_config
from .errors import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    NumericalError,
    PipelineError,
    ValidationFailure,
    exit_code_for,
)
from .gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from .metrics import evaluate
from .models import MetricsReport, RunManifest, validate_many
from .params import ModelParams
from .predictor import MotionPredictor
from .storage import read_predictions, read_scenes, write_csv, write_json, write_jsonl, write_manifest
from .synthgen import generate_scenes, perturb_to_predictions
from .trainer import train_toy

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pip_motion", description="Motion interaction pipeline at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate synthetic scenes")
    gen.add_argument("--config", type=str, default=None, help="Sectioned JSON config")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--num", type=int, required=True)
    gen.add_argument("--out", type=str, required=True)

    perturb = sub.add_parser("perturb", help="Noise-perturbed oracle predictions")
    perturb.add_argument("--config", type=str, default=None)
    perturb.add_argument("--scenes", type=str, required=True)
    perturb.add_argument("--noise", type=float, required=True)
    perturb.add_argument("--seed", type=int, default=None)
    perturb.add_argument("--out", type=str, required=True)

    infer = sub.add_parser("infer", help="Run the pipeline over synthesized queries")
    infer.add_argument("--config", type=str, default=None)
    infer.add_argument("--scenes", type=str, required=True)
    infer.add_argument("--params", type=str, required=True)
    infer.add_argument("--out", type=str, required=True)

    train = sub.add_parser("train", help="Toy-scale training")
    train.add_argument("--config", type=str, default=None)
    train.add_argument("--scenes", type=str, required=True)
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", type=str, required=True)
    train.add_argument("--log", type=str, required=True)

    ev = sub.add_parser("eval", help="Evaluate predictions against scenes")
    ev.add_argument("--config", type=str, default=None)
    ev.add_argument("--scenes", type=str, required=True)
    ev.add_argument("--preds", type=str, required=True)
    ev.add_argument("--tau-epa", type=float, default=None)
    ev.add_argument("--report", type=str, required=True)
    ev.add_argument("--csv", type=str, default=None, help="Append one summary row for plotting")
    ev.add_argument("--label", type=str, default=None, help="Row label (default: predictions file stem)")

    gc = sub.add_parser("gradcheck", help="Finite-difference check of every block")
    gc.add_argument("--config", type=str, default=None, help="Model section overrides the tiny config")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--max-coords", type=int, default=None,
                    help="Sample at most this many coordinates per tensor (default: every coordinate)")

    demo = sub.add_parser("demo", help="gen -> train -> infer -> eval on the tiny config")
    demo.add_argument("--config", type=str, default=None)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--num", type=int, default=4)
    demo.add_argument("--steps", type=int, default=300)
    demo.add_argument("--out-dir", type=str, default="demo_out")
    return parser


def _load_scenes(path: str, run_config: RunConfig):
    scenes = read_scenes(path)
    _check(scenes, run_config, path)
    return scenes


def _check(items, run_config: RunConfig, path: str) -> None:
    violations = validate_many(items, run_config.model)
    if violations:
        for v in violations:
            logger.error(f"{path}: {v}")
        raise ValidationFailure(f"{path}: {len(violations)} violation(s), first: {violations[0]}", violations)


def _manifest(command: str, run_config: RunConfig, seed: Optional[int], inputs: Dict[str, str],
              outputs: Dict[str, str], started: float) -> RunManifest:
    return RunManifest(command=command, config=run_config.to_dict(), seed=seed, inputs=inputs,
                       outputs=outputs, build=__version__, duration_seconds=time.perf_counter() - started)


def _with_seed(run_config: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return run_config
    return run_config.model_copy(update={
        "generator": run_config.generator.model_copy(update={"seed": seed}),
        "training": run_config.training.model_copy(update={"seed": seed}),
    })


def summary_row(report: MetricsReport, label: str) -> Dict:
    return {
        "label": label,
        "epa": report.epa,
        "min_ade": report.min_ade_mean,
        "min_fde": report.min_fde_mean,
        "miss_rate": report.miss_rate,
        "map_ap": report.map_ap.mean,
        "det_ap": report.det_ap.mean,
        "n_gt": report.n_gt,
        "n_fp": report.n_fp,
        "tau_epa": report.tau_epa,
    }


# --- Commands ---

def cmd_gen(args, run_config: RunConfig) -> int:
    started = time.perf_counter()
    run_config = _with_seed(run_config, args.seed)
    scenes = generate_scenes(run_config.generator, args.num, run_config.model)
    write_jsonl(args.out, scenes)
    write_manifest(args.out, _manifest("gen", run_config, run_config.generator.seed, {}, {"scenes": args.out}, started))
    return EXIT_OK


def cmd_perturb(args, run_config: RunConfig) -> int:
    started = time.perf_counter()
    run_config = _with_seed(run_config, args.seed)
    scenes = _load_scenes(args.scenes, run_config)
    preds = [perturb_to_predictions(s, run_config.generator, args.noise, run_config.model) for s in scenes]
    write_jsonl(args.out, preds)
    write_manifest(args.out, _manifest("perturb", run_config, run_config.generator.seed,
                                       {"scenes": args.scenes}, {"predictions": args.out}, started))
    return EXIT_OK


def cmd_infer(args, run_config: RunConfig) -> int:
    started = time.perf_counter()
    scenes = _load_scenes(args.scenes, run_config)
    predictor = MotionPredictor(run_config.model, run_config.generator)
    predictor.load_params(args.params)
    write_jsonl(args.out, predictor.predict(scenes))
    write_manifest(args.out, _manifest("infer", run_config, run_config.generator.seed,
                                       {"scenes": args.scenes, "params": args.params},
                                       {"predictions": args.out}, started))
    return EXIT_OK


def cmd_train(args, run_config: RunConfig) -> int:
    started = time.perf_counter()
    run_config = _with_seed(run_config, args.seed)
    if args.steps is not None:
        run_config = run_config.model_copy(update={
            "training": run_config.training.model_copy(update={"steps": args.steps})})
    scenes = _load_scenes(args.scenes, run_config)
    params = ModelParams.init(run_config.model, run_config.training.seed)
    try:
        result = train_toy(scenes, params, run_config.model, run_config.training, run_config.generator)
    except NumericalError as e:
        if e.history:
            write_csv(args.log, pd.DataFrame(e.history))
        raise
    result.params.save(args.out)
    write_csv(args.log, result.history_frame())
    write_manifest(args.out, _manifest("train", run_config, run_config.training.seed, {"scenes": args.scenes},
                                       {"params": args.out, "log": args.log}, started))
    return EXIT_OK


def cmd_eval(args, run_config: RunConfig) -> int:
    started = time.perf_counter()
    if args.tau_epa is not None:
        run_config = run_config.model_copy(update={"model": run_config.model.with_overrides(TAU_EPA=args.tau_epa)})
    scenes = _load_scenes(args.scenes, run_config)
    preds = read_predictions(args.preds)
    _check(preds, run_config, args.preds)
    report = evaluate(scenes, preds, run_config.model)
    write_json(args.report, report.model_dump(mode="json"))
    outputs = {"report": args.report}
    if args.csv:
        label = args.label or Path(args.preds).stem
        write_csv(args.csv, pd.DataFrame([summary_row(report, label)]), append=True)
        outputs["csv"] = args.csv
    print(json.dumps(summary_row(report, args.label or Path(args.preds).stem), indent=2))
    write_manifest(args.report, _manifest("eval", run_config, None,
                                          {"scenes": args.scenes, "predictions": args.preds}, outputs, started))
    return EXIT_OK


def cmd_gradcheck(args, run_config: Optional[RunConfig]) -> int:
    started = time.perf_counter()
    config = run_config.model if run_config is not None else tiny_config()
    results = run_gradcheck(config, eps=args.eps, max_coords=args.max_coords)
    for r in results:
        print(f"{r.name:20s} {r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    record_config = run_config or RunConfig(model=config)
    write_manifest("gradcheck", _manifest("gradcheck", record_config, None, {},
                                          {"blocks": ",".join(r.name for r in results)}, started))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check above {GRADCHECK_TOLERANCE} for: {', '.join(failed)}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_demo(args, run_config: Optional[RunConfig]) -> int:
    started = time.perf_counter()
    if run_config is None:
        run_config = RunConfig(model=tiny_config())
    run_config = _with_seed(run_config, args.seed)
    run_config = run_config.model_copy(update={
        "generator": run_config.generator.model_copy(update={"exit_fraction": 0.0}),
        "training": run_config.training.model_copy(update={"steps": args.steps, "log_every": max(1, args.steps // 10)}),
    })
    out = Path(args.out_dir)
    paths = {name: str(out / name) for name in
             ("scenes.jsonl", "params.json", "loss.csv", "predictions.jsonl", "report.json")}

    scenes = generate_scenes(run_config.generator, args.num, run_config.model)
    write_jsonl(paths["scenes.jsonl"], scenes)
    params = ModelParams.init(run_config.model, run_config.training.seed)
    result = train_toy(scenes, params, run_config.model, run_config.training, run_config.generator)
    result.params.save(paths["params.json"])
    write_csv(paths["loss.csv"], result.history_frame())

    predictor = MotionPredictor(run_config.model, run_config.generator)
    predictor.use_params(result.params)
    preds = predictor.predict(scenes)
    write_jsonl(paths["predictions.jsonl"], preds)
    report = evaluate(scenes, preds, run_config.model)
    write_json(paths["report.json"], report.model_dump(mode="json"))
    print(json.dumps(summary_row(report, "demo"), indent=2))
    write_manifest(paths["report.json"], _manifest("demo", run_config, args.seed, {}, paths, started))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "perturb": cmd_perturb,
    "infer": cmd_infer,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "demo": cmd_demo,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        if args.command in ("gradcheck", "demo") and args.config is None:
            run_config = None
        else:
            run_config = load_config(args.config)
        return COMMANDS[args.command](args, run_config)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"Cannot read input: {e}")
        return EXIT_USAGE
    except ValidationFailure as e:
        for v in e.violations:
            print(f"violation: {v}", file=sys.stderr)
        logger.error(f"Validation failed: {e}")
        return exit_code_for(e)
    except PipelineError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
