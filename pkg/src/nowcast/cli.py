"""Command-line entry point: ``nowcast <command> ...``.

Every command writes into a fresh run directory holding its outputs and a
``manifest.json`` with the configuration, seeds and SHA-256 hashes of all
inputs and outputs. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nclt
from .cells import ConfigError, ModelConfig, count_params

log = logging.getLogger("nowcast")

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad arguments, configuration or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # name relative to run dir -> sha256
    wall_clock_seconds: float = 0.0
    version: str = __version__
    argv: list[str] = field(default_factory=list)  # replayable command line

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _hash_inputs(paths) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths}


def _hash_outputs(run_dir: Path) -> dict[str, str]:
    return {str(p.relative_to(run_dir)): sha256_file(p)
            for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != MANIFEST}


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = _existing(path, "config file")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{p}: top level must be an object")
    return d


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("NCLT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise UsageError(f"NCLT_THREADS must be an integer, got {env!r}") from exc
    else:
        n = flag if flag is not None else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _read_store(path: Path) -> np.ndarray:
    try:
        arr = nclt.open_tensor(path)
    except nclt.FormatError as exc:
        raise UsageError(str(exc)) from exc
    if arr.ndim != 5:
        raise UsageError(f"{path}: expected a sequence store (n, T, C, H, W), got shape {arr.shape}")
    return arr


def _sidecar(store: Path) -> dict:
    p = store.parent / "dataset.json"
    return json.loads(p.read_text()) if p.exists() else {}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate_mnist(args, threads: int) -> RunManifest:
    from .mnist import MovingMnistConfig, build_dataset, bundled_digits, load_idx

    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.digits is not None:
        raw["digits"] = args.digits
    if args.counts is not None:
        try:
            raw["counts"] = [int(c) for c in args.counts.split(",")]
        except ValueError:
            raise UsageError(f"--counts expects three comma-separated integers, got {args.counts!r}") from None
        if len(raw["counts"]) != 3 or min(raw["counts"]) < 0:
            raise UsageError(f"--counts expects three non-negative integers, got {args.counts!r}")
    try:
        cfg = MovingMnistConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except TypeError as exc:
        raise UsageError(f"invalid Moving-MNIST config: {exc}") from exc
    inputs = []
    if args.idx:
        inputs.append(_existing(args.idx, "IDX file"))
        pool = load_idx(args.idx)
    else:
        pool = bundled_digits(cfg.digit_size)
    if pool.shape[0] < cfg.pool[1]:
        raise UsageError(f"digit pool has {pool.shape[0]} images, config needs {cfg.pool[1]}")
    out = _fresh_dir(args.out)
    build_dataset(cfg, out, pool, threads=threads)
    return RunManifest("generate-mnist", {"dataset": cfg.to_dict(), "pool": "idx" if args.idx else "bundled"},
                       {"seed": cfg.seed}, _hash_inputs(inputs))


def _load_raw_days(directory: Path) -> np.ndarray:
    """Per-day NCLT tensors (``T x M x N``) or one subdirectory of PGM frames per day."""
    from .plotting import read_pgm

    files = sorted(directory.glob("*.nclt"))
    if files:
        return np.stack([nclt.read_tensor(f) for f in files]), files
    days = sorted(d for d in directory.iterdir() if d.is_dir())
    if not days:
        raise UsageError(f"{directory}: no .nclt day files or PGM day directories")
    frames, inputs = [], []
    for d in days:
        pgms = sorted(d.glob("*.pgm"))
        frames.append(np.stack([read_pgm(p) for p in pgms]))
        inputs.extend(pgms)
    return np.stack(frames), inputs


def cmd_preprocess_radar(args, threads: int) -> RunManifest:
    from .radar import PipelineConfig, PreprocessError, SplitPlan, SyntheticRadarConfig, build_radar_dataset, generate_synthetic_radar

    raw_cfg = _load_json(args.config)
    unknown = set(raw_cfg) - {"pipeline", "split", "synthetic"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        pipeline = PipelineConfig.from_dict(raw_cfg.get("pipeline", {}))
        split = raw_cfg.get("split", {})
        plan = SplitPlan(**{k: tuple(v) if isinstance(v, list) else v for k, v in split.items()})
        synth = SyntheticRadarConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in raw_cfg.get("synthetic", {}).items()})
    except (TypeError, PreprocessError) as exc:
        raise UsageError(f"invalid preprocessing config: {exc}") from exc
    if args.synthetic:
        raw = generate_synthetic_radar(synth, args.seed)
        inputs = []
    else:
        raw, inputs = _load_raw_days(_existing(args.input, "input directory"))
    out = _fresh_dir(args.out)
    try:
        build_radar_dataset(raw, out, args.seed, plan, pipeline, threads)
    except PreprocessError as exc:
        raise UsageError(str(exc)) from exc
    config = {"pipeline": asdict(pipeline), "split": asdict(plan)}
    if args.synthetic:
        config["synthetic"] = synth.to_dict()
    return RunManifest("preprocess-radar", config, {"seed": args.seed}, _hash_inputs(inputs))


def cmd_train(args, threads: int) -> RunManifest:
    from .network import EncoderForecaster
    from .plotting import plot_loss_curves
    from .training import Schedule, TrainingError, load_training_checkpoint, split_io, train

    cfg = _load_json(args.config)
    unknown = set(cfg) - {"model", "schedule", "n_input"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    data = _existing(args.data, "data directory")
    train_path, val_path = data / "train.nclt", data / "val.nclt"
    for p in (train_path, val_path):
        _existing(str(p), "dataset store")
    try:
        schedule = Schedule.from_dict(cfg.get("schedule", {}))
        if args.seed is not None:
            schedule.seed = args.seed
        if args.resume:
            model, opt, header = load_training_checkpoint(_existing(args.resume, "checkpoint"))
            start_iteration, start_epoch = int(header["iteration"]), int(header["epoch"])
        else:
            model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
            model, opt = EncoderForecaster(model_cfg, seed=schedule.seed), None
            start_iteration = start_epoch = 0
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    seqs, vals = _read_store(train_path), _read_store(val_path)
    n_input = int(cfg.get("n_input", _sidecar(train_path).get("n_input") or
                          _sidecar(train_path).get("config", {}).get("n_input", seqs.shape[1] // 2)))
    want = (model.config.frame_channels, model.config.frame_height, model.config.frame_width)
    if seqs.shape[2:] != want:
        raise UsageError(f"store frames {seqs.shape[2:]} do not match model frames {want}")
    out = _fresh_dir(args.out)
    log.info("training %s model with %d parameters", model.config.cell, count_params(model.config))
    try:
        report, best = train(model, split_io(seqs, n_input), split_io(vals, n_input), schedule,
                             checkpoint=out / "best.ckpt", opt=opt, start_iteration=start_iteration,
                             start_epoch=start_epoch, last_checkpoint=out / "last.ckpt")
    except TrainingError as exc:
        exc.report.write_csv(out)
        raise
    report.write_csv(out)
    plot_loss_curves(report.iteration_loss, report.val_loss, out / "loss.png")
    summary = {"best_epoch": report.best_epoch, "best_iteration": report.best_iteration,
               "stop_reason": report.stop_reason, "n_input": n_input,
               "final_iteration": report.iteration_loss[-1][0] if report.iteration_loss else start_iteration}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunManifest("train", {"model": model.config.to_dict(), "schedule": asdict(schedule), "n_input": n_input,
                                 "resume": args.resume},
                       {"seed": schedule.seed}, _hash_inputs([train_path, val_path] + ([args.resume] if args.resume else [])))


def _write_grids(out: Path, inputs: np.ndarray, truth: np.ndarray | None, pred: np.ndarray, count: int) -> None:
    from .plotting import plot_frame_grid, write_pgm

    for i in range(min(count, len(pred))):
        rows = {"input": inputs[i, :, 0]}
        if truth is not None:
            rows["truth"] = truth[i, :, 0]
        rows["prediction"] = pred[i, :, 0]
        plot_frame_grid(rows, out / f"sequence_{i:03d}.png")
        for k in range(pred.shape[1]):
            write_pgm(out / f"sequence_{i:03d}_pred_{k + 1:02d}.pgm", pred[i, k, 0])


def _prediction_split(store: np.ndarray, n_input: int, steps: int | None) -> tuple[int, int]:
    if not 0 < n_input < store.shape[1] + (1 if steps else 0):
        raise UsageError(f"n_input {n_input} incompatible with {store.shape[1]}-frame sequences")
    steps = steps or store.shape[1] - n_input
    if steps < 1:
        raise UsageError("need at least one prediction step")
    return n_input, steps


def cmd_predict(args, threads: int) -> RunManifest:
    from .network import EncoderForecaster

    ckpt = _existing(args.checkpoint, "checkpoint")
    store_path = _existing(args.input, "input store")
    try:
        model, header, _ = EncoderForecaster.load(ckpt)
    except (nclt.FormatError, ValueError, KeyError) as exc:
        raise UsageError(f"{ckpt}: {exc}") from exc
    store = _read_store(store_path)
    want = (model.config.frame_channels, model.config.frame_height, model.config.frame_width)
    if store.shape[2:] != want:
        raise UsageError(f"input frames have shape {store.shape[2:]}, checkpoint expects {want}")
    n_input = args.n_input or _sidecar(store_path).get("n_input") or \
        _sidecar(store_path).get("config", {}).get("n_input")
    if n_input is None:
        raise UsageError("cannot infer --n-input")
    n_input, steps = _prediction_split(store, int(n_input), args.steps)
    out = _fresh_dir(args.out)
    n = len(store) if args.limit is None else min(args.limit, len(store))
    with nclt.TensorWriter(out / "predictions.nclt", (n, steps) + store.shape[2:]) as sink:
        for s in range(0, n, args.batch):
            x = np.asarray(store[s:min(n, s + args.batch), :n_input], dtype=np.float64)
            sink.append(model.predict_sequence(x, steps))
    if args.grids:
        pred = nclt.open_tensor(out / "predictions.nclt")
        truth = store[:, n_input:n_input + steps] if store.shape[1] >= n_input + steps else None
        _write_grids(out, np.asarray(store[:args.grids, :n_input]), None if truth is None else np.asarray(truth[:args.grids]),
                     np.asarray(pred[:args.grids]), args.grids)
    return RunManifest("predict", {"n_input": n_input, "steps": steps, "limit": args.limit, "grids": args.grids},
                       {}, _hash_inputs([ckpt, store_path]))


def _rover_one(args_tuple):
    from .rover import rover

    history, scheme, params, steps = args_tuple
    return rover(history, scheme, params, steps)


def cmd_baseline_rover(args, threads: int) -> RunManifest:
    from concurrent.futures import ThreadPoolExecutor

    from .rover import FlowError, FlowParams

    store_path = _existing(args.input, "input store")
    try:
        params = FlowParams.from_json(_existing(args.params, "params file")) if args.params else FlowParams()
    except (FlowError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid flow parameters: {exc}") from exc
    if args.scheme not in (1, 2, 3):
        raise UsageError("--scheme must be 1, 2 or 3")
    store = _read_store(store_path)
    n_input = args.n_input or _sidecar(store_path).get("n_input") or 5
    if store.shape[2] != 1:
        raise UsageError("the flow baseline handles single-channel frames only")
    need = 2 if args.scheme == 1 else 3
    if n_input < need or n_input > store.shape[1]:
        raise UsageError(f"scheme {args.scheme} needs >= {need} observed frames, have {n_input}")
    out = _fresh_dir(args.out)
    n = len(store) if args.limit is None else min(args.limit, len(store))
    with nclt.TensorWriter(out / "predictions.nclt", (n, args.steps) + store.shape[2:]) as sink, \
            ThreadPoolExecutor(max_workers=threads) as ex:
        for s in range(0, n, 64):
            jobs = [(np.asarray(store[i, :n_input, 0], dtype=np.float64), args.scheme, params, args.steps)
                    for i in range(s, min(n, s + 64))]
            sink.append(np.clip(np.stack(list(ex.map(_rover_one, jobs))), 0.0, 1.0)[:, :, None])
    return RunManifest("baseline-rover", {"scheme": args.scheme, "steps": args.steps, "params": params.to_dict(),
                                          "n_input": n_input, "limit": args.limit},
                       {}, _hash_inputs([store_path] + ([args.params] if args.params else [])))


def cmd_evaluate(args, threads: int) -> RunManifest:
    from .metrics import ZRParams, evaluate_frames
    from .plotting import plot_metric_curves
    from .radar import Affine

    pred_path = _existing(args.pred, "prediction store")
    truth_path = _existing(args.truth, "truth store")
    pred, truth = _read_store(pred_path), _read_store(truth_path)
    steps = pred.shape[1]
    if len(pred) > len(truth):
        raise UsageError(f"{len(pred)} predictions but only {len(truth)} truth sequences")
    if truth.shape[1] < steps or truth.shape[2:] != pred.shape[2:]:
        raise UsageError(f"truth store shape {truth.shape} cannot align with predictions {pred.shape}")
    if args.dataset:
        meta = json.loads(_existing(args.dataset, "dataset sidecar").read_text())
    else:
        meta = _sidecar(truth_path)
    if "affine" not in meta and (args.zmin is None or args.zmax is None):
        raise UsageError("no normalisation affine: pass --dataset or --zmin/--zmax")
    affine = Affine(args.zmin, args.zmax) if args.zmin is not None else Affine(**meta["affine"])
    truth_k = np.asarray(truth[:len(pred), truth.shape[1] - steps:], dtype=np.float64)
    report = evaluate_frames(np.asarray(pred, dtype=np.float64), truth_k, affine, ZRParams(threshold=args.threshold))
    out = _fresh_dir(args.out)
    report.write_csv(out / "report.csv")
    plot_metric_curves(report.steps, out / "metrics.png")
    (out / "summary.json").write_text(json.dumps(report.averages(), indent=2, sort_keys=True) + "\n")
    return RunManifest("evaluate", {"affine": affine.to_dict(), "threshold": args.threshold, "steps": steps},
                       {}, _hash_inputs([pred_path, truth_path]))


COMMANDS = {
    "generate-mnist": cmd_generate_mnist,
    "preprocess-radar": cmd_preprocess_radar,
    "train": cmd_train,
    "predict": cmd_predict,
    "baseline-rover": cmd_baseline_rover,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nowcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: all cores; NCLT_THREADS overrides)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = add("generate-mnist", "Generate Moving-MNIST sequence stores.")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--config", help="JSON with Moving-MNIST settings (counts, frames, digits, speed, ...)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--digits", type=int, help="digits per sequence (overrides the config)")
    p.add_argument("--counts", help="train,val,test sequence counts, e.g. 10000,2000,3000 (overrides the config)")
    p.add_argument("--idx", help="MNIST IDX image file; default is the bundled digit set")

    p = add("preprocess-radar", "Preprocess radar days into train/test/val sequence stores.")
    p.add_argument("--in", dest="input", help="directory of per-day .nclt tensors or PGM day folders")
    p.add_argument("--synthetic", action="store_true", help="generate synthetic radar-like days instead of reading --in")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--seed", type=int, default=0, help="block-assignment (and synthetic data) seed")
    p.add_argument("--config", help="JSON with optional 'pipeline', 'split' and 'synthetic' sections")

    p = add("train", "Train an encoder-forecaster network.")
    p.add_argument("--config", help="JSON with 'model', 'schedule' and optional 'n_input' sections")
    p.add_argument("--data", required=True, help="directory holding train.nclt and val.nclt")
    p.add_argument("--out", required=True, help="fresh run directory")
    p.add_argument("--seed", type=int, help="overrides the schedule seed")
    p.add_argument("--resume", help="training checkpoint (last.ckpt) to continue from")

    p = add("predict", "Run a trained network on a sequence store.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--input", required=True, help="sequence store")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--n-input", type=int, help="observed frames per sequence (default: from dataset.json)")
    p.add_argument("--steps", type=int, help="frames to predict (default: the rest of each sequence)")
    p.add_argument("--limit", type=int, help="only the first N sequences")
    p.add_argument("--batch", type=int, default=16, help="sequences per forward pass")
    p.add_argument("--grids", type=int, default=0, help="write image grids for the first N sequences")

    p = add("baseline-rover", "Optical-flow extrapolation baseline.")
    p.add_argument("--input", required=True, help="sequence store")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--scheme", type=int, default=2, choices=(1, 2, 3), help="flow initialisation scheme")
    p.add_argument("--steps", type=int, default=15, help="frames to extrapolate")
    p.add_argument("--params", help="JSON flow parameters")
    p.add_argument("--n-input", type=int, help="observed frames per sequence (default: from dataset.json, else 5)")
    p.add_argument("--limit", type=int, help="only the first N sequences")

    p = add("evaluate", "Score predictions against ground truth.")
    p.add_argument("--pred", required=True, help="prediction store (n, K, 1, H, W)")
    p.add_argument("--truth", required=True, help="full sequence store; its last K frames are the targets")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.add_argument("--dataset", help="dataset.json with the normalisation affine (default: next to --truth)")
    p.add_argument("--zmin", type=float, help="explicit affine minimum (dBZ)")
    p.add_argument("--zmax", type=float, help="explicit affine maximum (dBZ)")
    p.add_argument("--threshold", type=float, default=0.5, help="rain threshold in mm/h")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    start = time.monotonic()
    try:
        threads = resolve_threads(args.threads)
        manifest = COMMANDS[args.command](args, threads)
    except (UsageError, ConfigError) as exc:
        print(f"nowcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"nowcast {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    manifest.argv = argv
    manifest.outputs = _hash_outputs(out)
    manifest.wall_clock_seconds = round(time.monotonic() - start, 3)
    manifest.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
