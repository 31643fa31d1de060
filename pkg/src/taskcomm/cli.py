"""Command-line entry points: train, sweep, eval, fetch-data, plot.

Exit codes: 0 on success, 2 on usage/config errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import data as datasets
from . import evaluation, plots
from .config import ConfigError, ExperimentConfig
from .errors import TaskcommError
from .training import train

logger = logging.getLogger(__name__)

RUN_FILES = ("config.snapshot.json", "metrics.jsonl", "timing.jsonl", "checkpoint.ckpt", "record.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TaskcommError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskcomm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model and write a run directory")
    p_train.add_argument("config", help="path to a JSON config file")
    _add_override_args(p_train)
    p_train.add_argument("--run-dir", default=None, help="run directory (default: <output_dir>/<hash>)")
    p_train.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p_train.add_argument("--force", action="store_true", help="wipe and redo an existing run")
    p_train.set_defaults(handler=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a configured sweep to CSV (and figures)")
    p_sweep.add_argument("config")
    _add_override_args(p_sweep)
    p_sweep.add_argument("--out-dir", default=None, help="sweep output directory (default: <output_dir>/sweep-<hash>)")
    p_sweep.add_argument("--plot", action="store_true", help="also render figures")
    p_sweep.set_defaults(handler=cmd_sweep)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint at a channel condition")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--psnr", type=float, default=None, help="PSNR in dB (default: training value)")
    p_eval.add_argument("--mode", choices=("known", "pilot", "blind"), default="known")
    p_eval.add_argument("--pilots", type=int, default=None, help="pilot count for --mode pilot")
    p_eval.add_argument("--trials", type=int, default=None)
    p_eval.add_argument("--data-root", default=None)
    p_eval.add_argument(
        "--dump-features",
        default=None,
        metavar="NPZ",
        help="also write the received test features and labels for embedding tools",
    )
    p_eval.set_defaults(handler=cmd_eval)

    p_fetch = sub.add_parser("fetch-data", help="download a dataset into the data root")
    p_fetch.add_argument("task", choices=("mnist", "cifar10"))
    p_fetch.add_argument("--root", default=None)
    p_fetch.add_argument("--source", default=None, help="override the download mirror")
    p_fetch.set_defaults(handler=cmd_fetch)

    p_plot = sub.add_parser("plot", help="render figures from sweep CSV or an importance export")
    p_plot.add_argument("--kind", choices=("rate-distortion", "dynamic", "importance"), required=True)
    p_plot.add_argument("--csv", default=None, help="sweep CSV (rate-distortion/dynamic kinds)")
    p_plot.add_argument("--gamma", default=None, help="importance .npy export (importance kind)")
    p_plot.add_argument("--threshold", type=float, default=0.05)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(handler=cmd_plot)
    return parser


def _add_override_args(parser) -> None:
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--psnr-db", type=float, default=None)
    parser.add_argument("--data-root", default=None)
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key; VALUE is parsed as JSON, else kept as string",
    )


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config)
    overrides = {}
    for key, attr in (
        ("beta", "beta"),
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("psnr_db", "psnr_db"),
        ("data_root", "data_root"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return config.with_overrides(overrides)


def cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else Path(config.output_dir) / config.config_hash()
    resume_payload = None
    if run_dir.exists() and any(run_dir.iterdir()):
        if args.force:
            shutil.rmtree(run_dir)
        elif args.resume:
            resume_payload = ckpt.load_checkpoint(run_dir / "checkpoint.ckpt")
            if resume_payload["config_hash"] != config.config_hash():
                raise ConfigError(
                    "cannot resume: config changed "
                    f"({resume_payload['config_hash']} vs {config.config_hash()})"
                )
        else:
            raise ConfigError(
                f"run directory {run_dir} already exists; pass --resume to continue or --force to redo"
            )
    train_data, test_data = datasets.load_task(config.task, config.data_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot.json").write_text(
        json.dumps(config.to_dict(resolved=True), indent=2, sort_keys=True) + "\n"
    )

    metrics_path = run_dir / "metrics.jsonl"
    timing_path = run_dir / "timing.jsonl"
    if resume_payload is None:
        metrics_path.write_text("")
        timing_path.write_text("")

    def on_epoch(state, record, seconds):
        with open(metrics_path, "a") as f:
            f.write(record.to_json() + "\n")
        with open(timing_path, "a") as f:
            f.write(json.dumps({"epoch": record.epoch, "wall_time_s": seconds}) + "\n")
        ckpt.save_checkpoint(
            run_dir / "checkpoint.ckpt", state.model, config, extra=state.checkpoint_extra()
        )

    state = train(config, train_data, on_epoch=on_epoch, resume_payload=resume_payload)
    rng = torch.Generator().manual_seed(config.seed + 3)
    record = evaluation.record_for_model(
        state.model,
        config,
        test_data,
        psnr_db=config.psnr_db,
        estimator_mode=config.estimator_mode,
        rng=rng,
        checkpoint_id=config.config_hash(),
    )
    (run_dir / "record.json").write_text(json.dumps(record.to_csv_row(), indent=2) + "\n")
    if config.variant in ("vfe", "vl-vfe"):
        np.save(run_dir / "gamma.npy", state.model.bottleneck.gamma.detach().numpy())
    print(json.dumps({"run_dir": str(run_dir), **record.to_csv_row()}))
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else Path(config.output_dir) / f"sweep-{config.config_hash()}"
    train_data, test_data = datasets.load_task(config.task, config.data_root)
    if config.variant == "vl-vfe":
        records = _dynamic_sweep(config, train_data, test_data, out_dir)
        if args.plot:
            plots.dynamic_channel_figure(records, out_dir / "dynamic_channel.png")
    else:
        records = evaluation.rate_distortion_sweep(config, train_data, test_data, out_dir)
        if args.plot:
            plots.rate_distortion_figure(records, out_dir / "rate_distortion.png")
    print(str(out_dir / "sweep.csv"))
    return 0


def _dynamic_sweep(config, train_data, test_data, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    existing = evaluation.read_records_csv(csv_path)
    records = list(existing)
    done = {r.checkpoint_id for r in existing}
    grid = config.eval_psnr_grid or (10.0, 15.0, 20.0, 25.0)

    point_id = config.config_hash()
    if point_id not in done:
        state = train(config, train_data)
        ckpt.save_checkpoint(
            out_dir / "checkpoints" / f"{point_id}.ckpt", state.model, config, extra=state.checkpoint_extra()
        )
        rng = torch.Generator().manual_seed(config.seed + 3)
        records += evaluation.dynamic_channel_eval(
            state.model,
            config,
            test_data,
            psnr_grid=grid,
            estimator_mode=config.estimator_mode,
            rng=rng,
            checkpoint_id=point_id,
        )
        evaluation.write_records_csv(csv_path, records)
    else:
        logger.info("dynamic sweep %s already done", point_id)

    # fixed-length baseline curves for comparison: trained once at the
    # configured PSNR, evaluated across the grid with constant latency
    for n in config.baseline_jscc_n_grid or ():
        point = config.with_overrides({"variant": "deep-jscc", "n_initial": int(n), "beta": 0.0})
        baseline_id = point.config_hash()
        if baseline_id in done:
            continue
        state = train(point, train_data)
        ckpt.save_checkpoint(
            out_dir / "checkpoints" / f"{baseline_id}.ckpt", state.model, point, extra=state.checkpoint_extra()
        )
        rng = torch.Generator().manual_seed(point.seed + 3)
        for psnr_db in grid:
            records.append(
                evaluation.record_for_model(
                    state.model, point, test_data, psnr_db=psnr_db,
                    rng=rng, checkpoint_id=baseline_id,
                )
            )
        evaluation.write_records_csv(csv_path, records)
    return records


def cmd_eval(args) -> int:
    payload = ckpt.load_checkpoint(args.checkpoint)
    model, config = ckpt.restore_model(payload)
    if args.data_root:
        config = config.with_overrides({"data_root": args.data_root})
    _, test_data = datasets.load_task(config.task, config.data_root)
    psnr_db = config.psnr_db if args.psnr is None else args.psnr
    trials = args.trials if args.trials is not None else config.eval_trials
    if args.pilots is not None:
        config = config.with_overrides({"pilot_count": args.pilots, "estimator_mode": args.mode})
    rng = torch.Generator().manual_seed(config.seed + 3)
    record = evaluation.record_for_model(
        model,
        config,
        test_data,
        psnr_db=psnr_db,
        estimator_mode=args.mode,
        trials=trials,
        rng=rng,
        checkpoint_id=payload["config_hash"],
    )
    if args.dump_features:
        from taskcomm.channel import psnr_to_sigma2

        features, labels = evaluation.export_received_features(
            model, test_data, psnr_to_sigma2(psnr_db), rng=rng
        )
        np.savez(args.dump_features, features=features, labels=labels)
    print(json.dumps(record.to_csv_row(), indent=2))
    return 0


def cmd_fetch(args) -> int:
    fetched = datasets.fetch(args.task, root=args.root, source=args.source)
    if fetched:
        for path in fetched:
            print(str(path))
    else:
        print(f"{args.task}: already present")
    return 0


def cmd_plot(args) -> int:
    if args.kind in ("rate-distortion", "dynamic"):
        if not args.csv:
            raise ConfigError(f"--kind {args.kind} requires --csv")
        records = evaluation.read_records_csv(args.csv)
        if not records:
            raise ConfigError(f"no records found in {args.csv}")
        if args.kind == "rate-distortion":
            plots.rate_distortion_figure(records, args.out)
        else:
            plots.dynamic_channel_figure(records, args.out)
    else:
        if not args.gamma:
            raise ConfigError("--kind importance requires --gamma")
        gamma = np.load(args.gamma)
        plots.importance_histogram_figure(gamma, args.threshold, args.out)
    print(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
