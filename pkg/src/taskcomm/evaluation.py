"""Experiment harness: noisy accuracy, sweeps, dynamic-channel and prior studies.

Accuracy is always reported as a mean over several fresh-noise passes of the
test set together with its standard error; latency is recomputed from the
active dimension count and the channel constants, never stored independently.
Sweep results live in a single CSV that is rewritten atomically, so reruns
skip completed points and an interrupted sweep converges to the same file.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import channel
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import DataSplit
from .training import train

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "variant",
    "task",
    "beta",
    "psnr_db",
    "estimator_mode",
    "n_active",
    "latency_ms",
    "accuracy_pct",
    "accuracy_se",
    "seed",
    "checkpoint_id",
)


@dataclass(frozen=True)
class RunRecord:
    """One evaluated operating point."""

    variant: str
    task: str
    beta: float | None
    psnr_db: float
    estimator_mode: str
    n_active: float
    latency_ms: float
    accuracy_pct: float
    accuracy_se: float
    seed: int
    checkpoint_id: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy_pct <= 100.0:
            raise ValueError(f"accuracy_pct must be in [0, 100], got {self.accuracy_pct}")

    def to_csv_row(self) -> dict:
        row = dataclasses.asdict(self)
        row["beta"] = "" if self.beta is None else repr(self.beta)
        return {k: str(row[k]) for k in CSV_COLUMNS}

    @classmethod
    def from_csv_row(cls, row: dict) -> "RunRecord":
        return cls(
            variant=row["variant"],
            task=row["task"],
            beta=None if row["beta"] == "" else float(row["beta"]),
            psnr_db=float(row["psnr_db"]),
            estimator_mode=row["estimator_mode"],
            n_active=float(row["n_active"]),
            latency_ms=float(row["latency_ms"]),
            accuracy_pct=float(row["accuracy_pct"]),
            accuracy_se=float(row["accuracy_se"]),
            seed=int(row["seed"]),
            checkpoint_id=row["checkpoint_id"],
        )


def eval_accuracy(
    model,
    test_data: DataSplit,
    sigma2: float,
    trials: int = 10,
    rng: torch.Generator | None = None,
    gate_sigma2: float | None = None,
    batch_size: int = 1000,
) -> tuple[float, float]:
    """Mean top-1 accuracy (percent) and its standard error over noise trials.

    ``gate_sigma2`` feeds the channel-adaptive gate when it differs from the
    true channel variance (the mismatch studied with pilot estimation).
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    accuracies = [
        _accuracy_one_pass(model, test_data, sigma2, rng, gate_sigma2, batch_size)
        for _ in range(trials)
    ]
    mean = float(np.mean(accuracies))
    se = float(np.std(accuracies, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, se


@torch.no_grad()
def _accuracy_one_pass(model, test_data, sigma2, rng, gate_sigma2, batch_size):
    model.eval()
    correct = 0
    total = len(test_data)
    for start in range(0, total, batch_size):
        inputs = test_data.inputs[start : start + batch_size]
        targets = test_data.targets[start : start + batch_size]
        if model.variant == "vl-vfe":
            z, mask = model.encode_dynamic(
                inputs, torch.as_tensor(float(gate_sigma2 if gate_sigma2 is not None else sigma2))
            )
        else:
            z, mask = model.encode_static(inputs)
        if model.variant == "quantization":
            received = z  # error-free digital delivery at the capacity bound
        else:
            received = channel.transmit(z, sigma2, rng)
            if mask is not None:
                received = received * mask
        logits = model.decode(received)
        correct += int((logits.argmax(dim=1) == targets).sum())
    return 100.0 * correct / total


def record_for_model(
    model,
    config: ExperimentConfig,
    test_data: DataSplit,
    psnr_db: float,
    estimator_mode: str = "known",
    trials: int | None = None,
    rng: torch.Generator | None = None,
    checkpoint_id: str = "",
) -> RunRecord:
    """Evaluate one model at one operating point and package the result."""
    sigma2 = channel.psnr_to_sigma2(psnr_db)
    trials = config.eval_trials if trials is None else trials
    if model.variant == "vl-vfe":
        records = dynamic_channel_eval(
            model,
            config,
            test_data,
            psnr_grid=[psnr_db],
            estimator_mode=estimator_mode,
            trials=trials,
            rng=rng,
            checkpoint_id=checkpoint_id,
        )
        return records[0]
    accuracy, se = eval_accuracy(model, test_data, sigma2, trials=trials, rng=rng)
    n_active = model.active_dimensions()
    latency_ms = _latency_ms(model, config, n_active, sigma2)
    return RunRecord(
        variant=model.variant,
        task=config.task,
        beta=config.beta if model.variant in ("vfe", "vl-vfe") else None,
        psnr_db=psnr_db,
        estimator_mode=estimator_mode,
        n_active=float(n_active),
        latency_ms=latency_ms,
        accuracy_pct=accuracy,
        accuracy_se=se,
        seed=config.seed,
        checkpoint_id=checkpoint_id,
    )


def _latency_ms(model, config, n_active, sigma2) -> float:
    if model.variant == "quantization":
        seconds = channel.latency_digital(
            int(n_active), config.bits_per_dim, 1.0, sigma2, config.symbol_rate_baud
        )
    else:
        seconds = channel.latency_analog(n_active, config.symbol_rate_baud)
    return seconds * 1000.0


def dynamic_channel_eval(
    model,
    config: ExperimentConfig,
    test_data: DataSplit,
    psnr_grid,
    estimator_mode: str = "known",
    pilot_count: int | None = None,
    trials: int | None = None,
    rng: torch.Generator | None = None,
    checkpoint_id: str = "",
) -> list[RunRecord]:
    """Evaluate a channel-adaptive model across channel conditions.

    The gate consumes the transmitter's noise-variance belief (exact, pilot
    estimate, or the blind worst case) while the channel applies the true
    variance; that mismatch is the point of the pilot study.
    """
    if model.variant != "vl-vfe":
        raise ValueError("dynamic_channel_eval requires a channel-adaptive model")
    trials = config.eval_trials if trials is None else trials
    pilot_count = config.pilot_count if pilot_count is None else pilot_count
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    records = []
    for psnr_db in psnr_grid:
        sigma2 = channel.psnr_to_sigma2(psnr_db)
        accuracies = []
        counts = []
        for _ in range(trials):
            estimate = _estimate_for_mode(estimator_mode, sigma2, pilot_count, rng)
            accuracies.append(
                _accuracy_one_pass(model, test_data, sigma2, rng, estimate.estimate, 1000)
            )
            counts.append(model.active_dimensions(estimate.estimate))
        accuracy = float(np.mean(accuracies))
        se = float(np.std(accuracies, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        n_active = float(np.mean(counts))
        records.append(
            RunRecord(
                variant=model.variant,
                task=config.task,
                beta=config.beta,
                psnr_db=float(psnr_db),
                estimator_mode=estimator_mode,
                n_active=n_active,
                latency_ms=channel.latency_analog(n_active, config.symbol_rate_baud) * 1000.0,
                accuracy_pct=accuracy,
                accuracy_se=se,
                seed=config.seed,
                checkpoint_id=checkpoint_id,
            )
        )
    return records


def _estimate_for_mode(mode, sigma2, pilot_count, rng):
    if mode == "known":
        return channel.known_noise_variance(sigma2)
    if mode == "blind":
        return channel.blind_noise_variance()
    if mode == "pilot":
        sent = torch.zeros(pilot_count)
        received = channel.transmit(sent, sigma2, rng)
        return channel.estimate_noise_variance(sent, received)
    raise ValueError(f"unknown estimator mode {mode!r}")


def rate_distortion_sweep(
    config: ExperimentConfig,
    train_data: DataSplit,
    test_data: DataSplit,
    out_dir,
    beta_grid=None,
) -> list[RunRecord]:
    """Train one model per grid point and collect the accuracy/latency curve.

    Completed points (matched by config hash) are read back from the CSV
    instead of being retrained, so an interrupted sweep can resume. A failed
    point is logged and skipped; the sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    existing = {r.checkpoint_id: r for r in read_records_csv(csv_path)} if csv_path.exists() else {}

    grid = beta_grid if beta_grid is not None else (config.beta_grid or (config.beta,))
    points = [config.with_overrides({"variant": config.variant, "beta": b}) for b in grid]
    points += _baseline_points(config)

    records = list(existing.values())
    for point in points:
        point_id = point.config_hash()
        if point_id in existing:
            logger.info("sweep point %s already done, skipping", point_id)
            continue
        try:
            record = _run_sweep_point(point, train_data, test_data, out_dir, point_id)
        except Exception:
            logger.exception("sweep point %s failed; continuing", point_id)
            continue
        records.append(record)
        write_records_csv(csv_path, records)
    return sort_records(records)


def _run_sweep_point(point, train_data, test_data, out_dir, point_id) -> RunRecord:
    logger.info(
        "training sweep point: variant=%s beta=%s psnr=%s", point.variant, point.beta, point.psnr_db
    )
    state = train(point, train_data)
    checkpoint_path = Path(out_dir) / "checkpoints" / f"{point_id}.ckpt"
    save_checkpoint(checkpoint_path, state.model, point, extra=state.checkpoint_extra())
    rng = torch.Generator().manual_seed(point.seed + 3)
    return record_for_model(
        state.model,
        point,
        test_data,
        psnr_db=point.psnr_db,
        estimator_mode=point.estimator_mode,
        rng=rng,
        checkpoint_id=point_id,
    )


def _baseline_points(config) -> list:
    points = []
    if config.baseline_jscc_n_grid:
        for n in config.baseline_jscc_n_grid:
            points.append(
                config.with_overrides({"variant": "deep-jscc", "n_initial": int(n), "beta": 0.0})
            )
    if config.baseline_quant_budget_ms is not None:
        points.extend(_quantization_candidates(config))
    return points


def _quantization_candidates(config, bits_options=(1, 2, 4, 8)) -> list:
    """(n, bits) pairs whose ideal-coding latency fits the configured budget."""
    sigma2 = config.sigma2
    rate = channel.capacity_bpcu(1.0, sigma2)
    budget_bits = config.baseline_quant_budget_ms / 1000.0 * config.symbol_rate_baud * rate
    points = []
    for bits in bits_options:
        n = min(config.n_initial, int(budget_bits // bits))
        if n >= 1:
            points.append(
                config.with_overrides(
                    {"variant": "quantization", "n_initial": n, "bits_per_dim": bits, "beta": 0.0}
                )
            )
    return points


def prior_ablation(
    config: ExperimentConfig,
    train_data: DataSplit,
    test_data: DataSplit,
):
    """Train with the configured prior and export the importance vector.

    Returns (importance vector as numpy, accuracy percent, standard error,
    active dimension count, final TrainState).
    """
    if config.variant != "vfe":
        raise ValueError("the prior ablation trains the static variant")
    state = train(config, train_data)
    model = state.model
    rng = torch.Generator().manual_seed(config.seed + 3)
    accuracy, se = eval_accuracy(
        model, test_data, config.sigma2, trials=config.eval_trials, rng=rng
    )
    gamma = model.bottleneck.gamma.detach().numpy().copy()
    return gamma, accuracy, se, model.bottleneck.active_count, state


@torch.no_grad()
def export_received_features(
    model,
    test_data: DataSplit,
    sigma2: float,
    rng: torch.Generator | None = None,
    gate_sigma2: float | None = None,
    batch_size: int = 1000,
):
    """Noise-corrupted feature matrix plus labels, for external embedding tools."""
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    model.eval()
    received_batches = []
    for start in range(0, len(test_data), batch_size):
        inputs = test_data.inputs[start : start + batch_size]
        if model.variant == "vl-vfe":
            z, mask = model.encode_dynamic(
                inputs, torch.as_tensor(float(gate_sigma2 if gate_sigma2 is not None else sigma2))
            )
        else:
            z, mask = model.encode_static(inputs)
        if model.variant == "quantization":
            received = z
        else:
            received = channel.transmit(z, sigma2, rng)
            if mask is not None:
                received = received * mask
        received_batches.append(received)
    features = torch.cat(received_batches).numpy()
    return features, test_data.targets.numpy().copy()


def sort_records(records) -> list:
    return sorted(
        records,
        key=lambda r: (r.latency_ms, r.variant, r.beta if r.beta is not None else -1.0, r.psnr_db),
    )


def write_records_csv(path, records) -> None:
    """Rewrite the results file atomically, canonically sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for record in sort_records(records):
            writer.writerow(record.to_csv_row())
    os.replace(tmp, path)


def read_records_csv(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [RunRecord.from_csv_row(row) for row in reader]


def spearman_rank_correlation(xs, ys) -> float:
    """Spearman rho via Pearson correlation of midranks."""
    def midranks(values):
        order = np.argsort(values, kind="stable")
        ranks = np.empty(len(values), dtype=np.float64)
        sorted_vals = np.asarray(values, dtype=np.float64)[order]
        i = 0
        while i < len(values):
            j = i
            while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
                j += 1
            ranks[order[i : j + 1]] = (i + j) / 2.0
            i = j + 1
        return ranks

    rx = midranks(xs)
    ry = midranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx ** 2).sum()) * float((ry ** 2).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)
