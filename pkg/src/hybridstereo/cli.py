"""Command-line entry point: ``hybridstereo <command> [options]``.

Commands: ``synth``, ``train``, ``eval``, ``landscape``, ``trajectory``,
``convert`` and ``params``. Every command accepts ``--config FILE.json`` and
repeated ``--set section.key=value`` overrides; the effective configuration is
written to ``run_manifest.json`` in the output directory.

Exit codes: 0 ok, 2 bad arguments or configuration, 3 data error, 4 numeric
failure. Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, DataFormatError, NumericError

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("hybridstereo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - single-line errors instead of usage dumps
        raise UsageError(message)


# -- configuration ----------------------------------------------------------


def default_config() -> dict:
    from .networks import ModelConfig
    from .training import TrainConfig

    return {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict()}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible.

    Raises:
        ConfigurationError: Malformed override or a key absent from ``config``.
    """
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not key=value")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return config


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {prefix + key!r} must be an object")
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def load_config(path, overrides: list[str] | None = None) -> dict:
    config = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"no config file {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc.msg}") from None
        _merge(config, data)
    return apply_overrides(config, overrides or [])


def source_hash() -> str:
    """SHA-256 over the package version and every module's source text."""
    h = hashlib.sha256(__version__.encode())
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, config: dict | None = None, **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "arguments": arguments,
        "config": config,
        "version": __version__,
        "source_sha256": source_hash(),
    }
    manifest.update(extra)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_data(path) -> list:
    from .datasets import load_manifest

    return list(load_manifest(path))


# -- commands ---------------------------------------------------------------


def cmd_synth(args, config) -> int:
    from .datasets import save_samples, synth_generate

    samples = synth_generate(args.seed, args.height, args.width, args.dmax, args.n)
    save_samples(samples, args.out, split=args.split)
    write_run_manifest(args.out, "synth", args, config)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    from .networks import ModelConfig, StereoModel, toy_config
    from .training import TrainConfig, save_run, train

    if args.variant is not None:
        config["model"]["variant"] = args.variant
    if args.toy:
        toy = toy_config(config["model"]["variant"]).to_dict()
        config["model"].update({k: v for k, v in toy.items() if k not in ("variant", "seed")})
    for key, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        if getattr(args, attr) is not None:
            config["train"][key] = getattr(args, attr)
    if args.seed is not None:
        config["model"]["seed"] = args.seed
    if args.dmax is not None:
        config["model"]["dmax"] = args.dmax
    if args.crop is not None:
        config["train"]["crop"] = None if args.crop <= 0 else args.crop

    data = _load_data(args.data)
    crop = config["train"]["crop"]
    if crop is not None:
        fit = min(crop, *(min(s.shape) for s in data))
        if fit < crop:
            logger.warning("crop %d exceeds the data; using %d", crop, fit)
            config["train"]["crop"] = fit
    model_cfg = ModelConfig.from_dict(config["model"])
    train_cfg = TrainConfig.from_dict(config["train"])
    model = StereoModel(model_cfg)
    result = train(model, data, train_cfg)
    out = Path(args.out)
    save_run(result, out, train_cfg, extra={"data": str(args.data)})
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "epe", "lr"])
        for i, (loss, e, lr) in enumerate(zip(result.losses, result.epes, result.lrs)):
            writer.writerow([i + 1, repr(loss), repr(e), repr(lr)])
    write_run_manifest(out, "train", args, config, seeds={"model": model_cfg.seed, "train": train_cfg.seed})
    print(f"final epe {result.epes[-1]:.4f} after {train_cfg.epochs} epochs")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_depth, evaluate_test19, evaluate_warping, write_frames_csv, write_report

    model, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "disparity":
        report, frames = evaluate_test19(model, data, crop_px=args.crop_borders, non_occluded=args.non_occluded)
    elif args.mode == "depth":
        report = evaluate_depth(model, data, use_cx_offset=not args.no_cx_offset)
        frames = [{"id": k, "mae_mm": v} for k, v in report.per_frame.items()]
    else:
        report = evaluate_warping(model, data)
        frames = report.per_pair
    write_report(report, out / "report.json")
    write_frames_csv(frames, out / "frames.csv")
    write_run_manifest(out, "eval", args, config)
    print(json.dumps({k: v for k, v in report.to_json().items() if not isinstance(v, (list, dict))}))
    return EXIT_OK


def cmd_landscape(args, config) -> int:
    from .analysis import evaluate_landscape, export_surface, grid_axis, make_eval_batch, random_direction
    from .checkpoint import load_checkpoint

    if args.grid < 2 or args.range <= 0:
        raise ConfigurationError("--grid must be >= 2 and --range positive")
    model, _ = load_checkpoint(args.checkpoint)
    batch = make_eval_batch(_load_data(args.data), args.batch, seed=args.seed_a)
    delta = random_direction(model, args.seed_a)
    eta = random_direction(model, args.seed_b)
    axis = grid_axis(args.grid, args.range)
    grid = evaluate_landscape(model, batch, delta, eta, axis, axis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_surface(grid, out / "surface")
    write_run_manifest(out, "landscape", args, config, seeds={"a": args.seed_a, "b": args.seed_b}, center_loss=grid.center_loss)
    print(f"center loss {grid.center_loss:.6f}; {int(np.isnan(grid.losses).sum())} failed cells")
    return EXIT_OK


def cmd_trajectory(args, config) -> int:
    from .analysis import export_surface, make_eval_batch, trajectory_landscape
    from .checkpoint import load_checkpoint, read_checkpoint
    from .training import ParameterSnapshot

    run_dir = Path(args.run_dir)
    run_file = run_dir / "run.json"
    if not run_file.is_file():
        raise FileNotFoundError(f"no run.json in {run_dir}")
    run = json.loads(run_file.read_text())
    names = run["snapshots"]
    if not names:
        raise DataFormatError(f"{run_file}: no snapshots recorded")
    model, _ = load_checkpoint(run_dir / names[-1])
    order = [n for n, _ in model.named_parameters()]
    losses = run.get("snapshot_losses") or [None] * len(names)
    snapshots = []
    for name, loss in zip(names, losses):
        manifest, arrays = read_checkpoint(run_dir / name)
        theta = np.concatenate([arrays[n].reshape(-1) for n in order])
        epoch = manifest.get("extra", {}).get("epoch", len(snapshots))
        snapshots.append(ParameterSnapshot(epoch, theta, float("nan") if loss is None else loss))
    batch = make_eval_batch(_load_data(args.data), args.batch, seed=args.seed)
    grid, proj = trajectory_landscape(model, snapshots, batch, points=args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_surface(proj, out / "trajectory", image=False)
    export_surface(grid, out / "contour", trajectory=proj)
    write_run_manifest(
        out, "trajectory", args, config, explained=proj.explained.tolist(), degenerate=proj.degenerate
    )
    print(f"explained variance {proj.explained[0]:.4f} / {proj.explained[1]:.4f}")
    return EXIT_OK


def cmd_convert(args, config) -> int:
    from .datasets import curate_scared, load_scared_keyframes

    frames = load_scared_keyframes(args.scared_root)
    manifest = curate_scared(frames, out_dir=args.out, crop=tuple(args.crop), use_cx_offset=args.use_cx_offset)
    write_run_manifest(Path(args.out), "convert", args, config)
    print(f"curated {len(manifest)} samples, max disparity {manifest.extra['max_disparity']:.3f}")
    return EXIT_OK


def cmd_params(args, config) -> int:
    from .networks import format_parameter_report, parameter_report, toy_config

    overrides = {}
    if args.toy:
        overrides = {k: v for k, v in toy_config().to_dict().items() if k not in ("variant", "seed")}
    rows = parameter_report(**overrides)
    print(format_parameter_report(rows))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridstereo", description="Hybrid stereo matching toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with 'model' and 'train' sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic stereo pairs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--dmax", type=float, default=18.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--variant", choices=["baseline", "type1", "type2", "type3", "hybrid"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int, help="square crop size; 0 disables cropping")
    p.add_argument("--dmax", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--toy", action="store_true", help="use the small desk-scale architecture")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=["disparity", "depth", "warp"], default="disparity")
    p.add_argument("--crop-borders", type=int, default=100)
    p.add_argument("--non-occluded", action="store_true")
    p.add_argument("--no-cx-offset", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", parents=[common], help="loss surface along random directions")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--grid", type=int, default=41)
    p.add_argument("--range", type=float, default=1.0)
    p.add_argument("--seed-a", type=int, default=1)
    p.add_argument("--seed-b", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("trajectory", parents=[common], help="PCA projection of a training run")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("convert", parents=[common], help="curate depth keyframes into a test split")
    p.add_argument("--scared-root", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--crop", type=int, nargs=2, default=[0, 0], metavar=("LEFT", "RIGHT"))
    p.add_argument("--use-cx-offset", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("params", parents=[common], help="parameter counts of all variants")
    p.add_argument("--toy", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_params)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    message = str(exc).replace("\n", " ")
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        config = load_config(args.config, args.overrides)
        return args.func(args, config)
    except (UsageError, ConfigurationError) as exc:
        return _fail(EXIT_ARGS, exc)
    except (DataFormatError, FileNotFoundError, KeyError) as exc:
        return _fail(EXIT_DATA, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ValueError, TypeError) as exc:
        return _fail(EXIT_ARGS, exc)


if __name__ == "__main__":
    sys.exit(main())
