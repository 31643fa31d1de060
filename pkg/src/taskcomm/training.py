"""Training loops for all variants.

The static loop trains at a fixed noise variance and permanently prunes
low-importance bottleneck dimensions once per epoch; the variable-length
loop samples one noise variance per batch element, deactivates dimensions
per pass (never permanently), and trains the gate jointly. Baseline heads
train with plain cross-entropy. Identical config and seed reproduce the
loss trace bit for bit; non-finite losses roll the run back one epoch and
halve the learning rate once before aborting.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .errors import ModelContractViolation, TrainingDiverged
from .losses import (
    GaussianPriorKl,
    VibLossTerms,
    uniform_sigma2_sampler,
    vib_loss,
    vl_vib_loss,
)
from .models import ArchitectureSpec, build_model

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    """One deterministic metrics line; wall time is reported separately."""

    epoch: int
    cross_entropy: float
    kl_total: float
    total: float
    active_dims: float
    sigma2: object

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "cross_entropy": self.cross_entropy,
                "kl_total": self.kl_total,
                "total": self.total,
                "active_dims": self.active_dims,
                "sigma2": self.sigma2,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        data = json.loads(line)
        return cls(**data)


@dataclass
class TrainState:
    """Everything a run produced and what is needed to continue it."""

    config: ExperimentConfig
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    loss_trace: list = field(default_factory=list)
    pruned_history: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    data_rng: torch.Generator | None = None
    noise_rng: torch.Generator | None = None
    lr_halved: bool = False

    def checkpoint_extra(self) -> dict:
        return {
            "epoch": self.epoch,
            "optimizer_state": self.optimizer.state_dict(),
            "data_rng_state": self.data_rng.get_state(),
            "noise_rng_state": self.noise_rng.get_state(),
            "loss_trace": [r.to_json() for r in self.loss_trace],
            "pruned_history": list(self.pruned_history),
            "lr_halved": self.lr_halved,
        }


def train(config: ExperimentConfig, data, on_epoch=None, resume_payload=None) -> TrainState:
    """Dispatch to the right loop for the configured variant."""
    if config.variant == "vl-vfe":
        return _run_training(config, data, dynamic=True, on_epoch=on_epoch, resume_payload=resume_payload)
    return _run_training(config, data, dynamic=False, on_epoch=on_epoch, resume_payload=resume_payload)


def train_vfe(config: ExperimentConfig, data, on_epoch=None) -> TrainState:
    """Static-channel training with per-epoch permanent pruning."""
    if config.variant != "vfe":
        raise ValueError(f"train_vfe requires variant 'vfe', got {config.variant!r}")
    return _run_training(config, data, dynamic=False, on_epoch=on_epoch)


def train_vl_vfe(config: ExperimentConfig, data, on_epoch=None) -> TrainState:
    """Mixed-noise training with per-pass deactivation and a trained gate."""
    if config.variant != "vl-vfe":
        raise ValueError(f"train_vl_vfe requires variant 'vl-vfe', got {config.variant!r}")
    return _run_training(config, data, dynamic=True, on_epoch=on_epoch)


class _Divergence(Exception):
    pass


def _run_training(config, data, dynamic, on_epoch=None, resume_payload=None):
    if config.train_subset is not None:
        data = data.subset(config.train_subset)
    n_samples = len(data)
    if n_samples == 0:
        raise ValueError("training data is empty")

    spec = ArchitectureSpec(task=config.task, bottleneck_width=config.n_initial)
    model = build_model(
        spec,
        config.variant,
        seed=config.seed,
        gamma0=config.resolved_gamma0,
        bits_per_dim=config.bits_per_dim,
    )
    if config.prior == "gaussian" and config.variant == "vfe":
        model.prior_kl = GaussianPriorKl(config.n_initial)
    model.train()

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    data_rng = torch.Generator().manual_seed(config.seed + 1)
    noise_rng = torch.Generator().manual_seed(config.seed + 2)
    state = TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        data_rng=data_rng,
        noise_rng=noise_rng,
    )
    if resume_payload is not None:
        _restore_progress(state, resume_payload)

    sigma2 = config.sigma2
    sigma2_low, sigma2_high = config.sigma2_range
    sampler = uniform_sigma2_sampler(sigma2_low, sigma2_high) if dynamic else None
    total_epochs = config.resolved_epochs
    snapshot = _capture(state)

    while state.epoch < total_epochs:
        epoch = state.epoch + 1
        _set_learning_rate(state, epoch)
        started = time.perf_counter()
        try:
            sums = _train_one_epoch(state, data, n_samples, dynamic, sigma2, sampler)
        except _Divergence:
            if state.lr_halved:
                _restore(state, snapshot)
                raise TrainingDiverged(
                    f"loss diverged twice around epoch {epoch}; aborting", state=state
                )
            logger.warning(
                "non-finite loss in epoch %d; rolling back one epoch and halving the learning rate",
                epoch,
            )
            _restore(state, snapshot)
            state.lr_halved = True
            continue

        newly_pruned = 0
        if config.variant == "vfe":
            newly_pruned = state.model.bottleneck.prune(config.resolved_gamma0)
        state.pruned_history.append(newly_pruned)

        record = EpochRecord(
            epoch=epoch,
            cross_entropy=sums["ce"] / n_samples,
            kl_total=sums["kl"] / n_samples,
            total=sums["total"] / n_samples,
            active_dims=_epoch_active_dims(state.model, config),
            sigma2=[sigma2_low, sigma2_high] if dynamic else sigma2,
        )
        state.loss_trace.append(record)
        state.epoch = epoch
        seconds = time.perf_counter() - started
        state.epoch_seconds.append(seconds)
        logger.info(
            "epoch %d/%d ce=%.4f kl=%.4f total=%.4f active=%s",
            epoch,
            total_epochs,
            record.cross_entropy,
            record.kl_total,
            record.total,
            record.active_dims,
        )
        snapshot = _capture(state)
        if on_epoch is not None:
            on_epoch(state, record, seconds)

    if dynamic and state.model.gate is not None:
        state.model.gate.set_trained_range(sigma2_low, sigma2_high)
    state.model.eval()
    return state


def _train_one_epoch(state, data, n_samples, dynamic, sigma2, sampler):
    config = state.config
    model = state.model
    sums = {"ce": 0.0, "kl": 0.0, "total": 0.0}
    order = torch.randperm(n_samples, generator=state.data_rng)
    for start in range(0, n_samples, config.batch_size):
        idx = order[start : start + config.batch_size]
        batch = (data.inputs[idx], data.targets[idx])
        try:
            terms = _batch_loss(model, config, batch, dynamic, sigma2, sampler, state.noise_rng)
        except ModelContractViolation:
            # non-finite logits are how a diverged run usually surfaces
            raise _Divergence from None
        total = terms.total
        if not torch.isfinite(total):
            raise _Divergence
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
        if config.variant in ("vfe", "vl-vfe"):
            model.bottleneck.project_nonnegative_importance()
        weight = len(idx)
        sums["ce"] += float(terms.cross_entropy.detach()) * weight
        sums["kl"] += float(terms.kl_total.detach()) * weight
        sums["total"] += float(total.detach()) * weight
    return sums


def _batch_loss(model, config, batch, dynamic, sigma2, sampler, noise_rng):
    if dynamic:
        return vl_vib_loss(
            batch,
            model.encode_dynamic,
            model.decoder,
            sampler,
            beta=config.beta,
            noise_samples=config.noise_samples,
            rng=noise_rng,
        )

    if config.variant == "quantization":
        inputs, targets = batch
        z, _ = model.encode_static(inputs)
        logits = model.decoder(z)
        if not torch.isfinite(logits).all():
            raise ModelContractViolation("decoder produced non-finite logits")
        ce = F.cross_entropy(logits, targets)
        zero = torch.zeros((), dtype=ce.dtype)
        return VibLossTerms(cross_entropy=ce, kl_total=zero, beta=0.0)

    kl_fn = None
    beta = config.beta
    if config.variant == "deep-jscc":
        beta = 0.0
    elif config.prior == "gaussian":
        kl_fn = model.prior_kl
    return vib_loss(
        batch,
        model.encode_static,
        model.decoder,
        sigma2,
        beta=beta,
        noise_samples=config.noise_samples,
        rng=noise_rng,
        kl_fn=kl_fn,
    )


def _epoch_active_dims(model, config):
    if config.variant == "vfe":
        return float(model.bottleneck.active_count)
    if config.variant == "vl-vfe":
        # active count at the midpoint variance, after this epoch's updates
        with torch.no_grad():
            gamma = model.gate(torch.as_tensor(sum(config.sigma2_range) / 2.0))
            return float((gamma > model.gate_threshold).sum())
    return float(config.n_initial)


def _set_learning_rate(state, epoch):
    config = state.config
    lr = config.learning_rate
    if epoch > config.resolved_lr_decay_epoch:
        lr *= config.lr_decay_factor
    if state.lr_halved:
        lr *= 0.5
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def _capture(state) -> dict:
    return {
        "model": copy.deepcopy(state.model.state_dict()),
        "optimizer": copy.deepcopy(state.optimizer.state_dict()),
        "data_rng": state.data_rng.get_state().clone(),
        "noise_rng": state.noise_rng.get_state().clone(),
        "epoch": state.epoch,
        "trace_len": len(state.loss_trace),
        "pruned_len": len(state.pruned_history),
    }


def _restore(state, snapshot) -> None:
    state.model.load_state_dict(snapshot["model"])
    state.optimizer.load_state_dict(copy.deepcopy(snapshot["optimizer"]))
    state.data_rng.set_state(snapshot["data_rng"].clone())
    state.noise_rng.set_state(snapshot["noise_rng"].clone())
    state.epoch = snapshot["epoch"]
    del state.loss_trace[snapshot["trace_len"] :]
    del state.pruned_history[snapshot["pruned_len"] :]


def _restore_progress(state, payload) -> None:
    from .checkpoint import _to_tensor

    extra = payload["extra"]
    model_state = {k: _to_tensor(v) for k, v in payload["state"].items()}
    state.model.load_state_dict(model_state)
    state.optimizer.load_state_dict(_to_tensor(extra["optimizer_state"]))
    state.data_rng.set_state(_to_tensor(extra["data_rng_state"]))
    state.noise_rng.set_state(_to_tensor(extra["noise_rng_state"]))
    state.epoch = int(extra["epoch"])
    state.loss_trace = [EpochRecord.from_json(line) for line in extra["loss_trace"]]
    state.pruned_history = list(extra["pruned_history"])
    state.lr_halved = bool(extra["lr_halved"])
