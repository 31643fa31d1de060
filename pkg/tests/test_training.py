"""Training loops: determinism, pruning behavior, divergence recovery."""

import math

import pytest
import torch

import taskcomm.training as training_module
from taskcomm.config import ExperimentConfig
from taskcomm.errors import TrainingDiverged
from taskcomm.losses import VibLossTerms
from taskcomm.training import EpochRecord, train, train_vfe, train_vl_vfe


def tiny_config(**overrides):
    base = dict(
        task="mnist",
        variant="vfe",
        n_initial=16,
        beta=1e-3,
        psnr_db=20.0,
        batch_size=64,
        epochs=2,
        train_subset=256,
        eval_trials=2,
        seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def structured_split(n=512, seed=11):
    """Learnable synthetic task: labels from a fixed random linear rule."""
    from taskcomm.data import DataSplit

    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 784, generator=g)
    rule = torch.randn(784, 10, generator=g)
    return DataSplit(x, (x @ rule).argmax(dim=1))


class TestDeterminism:
    def test_identical_runs_produce_identical_traces(self, toy_split):
        config = tiny_config()
        a = train(config, toy_split)
        b = train(config, toy_split)
        assert [r.to_json() for r in a.loss_trace] == [r.to_json() for r in b.loss_trace]
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self, toy_split):
        a = train(tiny_config(seed=0), toy_split)
        b = train(tiny_config(seed=1), toy_split)
        assert [r.to_json() for r in a.loss_trace] != [r.to_json() for r in b.loss_trace]

    def test_epoch_record_round_trips(self):
        record = EpochRecord(epoch=3, cross_entropy=1.5, kl_total=-2.0, total=1.498, active_dims=12.0, sigma2=0.01)
        assert EpochRecord.from_json(record.to_json()) == record


class TestVfeLoop:
    def test_variant_guard(self, toy_split):
        with pytest.raises(ValueError):
            train_vfe(tiny_config(variant="vl-vfe"), toy_split)

    def test_trace_length_matches_epochs(self, toy_split):
        state = train_vfe(tiny_config(epochs=3), toy_split)
        assert state.epoch == 3
        assert len(state.loss_trace) == 3
        assert len(state.pruned_history) == 3

    def test_pruning_is_monotone_over_epochs(self, toy_split):
        state = train_vfe(tiny_config(epochs=6, beta=0.05), toy_split)
        actives = [r.active_dims for r in state.loss_trace]
        assert all(b <= a for a, b in zip(actives, actives[1:]))

    def test_no_pruning_without_sparsity_pressure(self, toy_split):
        state = train_vfe(tiny_config(beta=0.0, gamma0=0.0, epochs=3), toy_split)
        assert state.model.bottleneck.active_count == 16
        assert sum(state.pruned_history) == 0

    def test_huge_beta_prunes_nearly_everything(self):
        # importance moves about one Adam step per batch, so the toy run
        # needs a large step budget for the threshold crossing to happen
        split = structured_split(n=1024)
        config = tiny_config(
            beta=1.0, epochs=120, batch_size=64, train_subset=1024, lr_decay_epoch=120
        )
        state = train_vfe(config, split)
        assert state.model.bottleneck.active_count <= 2
        assert state.loss_trace[-1].cross_entropy > 1.0  # close to label entropy

    def test_moderate_beta_prunes_selectively(self):
        split = structured_split(n=1024)
        config = tiny_config(
            beta=0.05, epochs=120, batch_size=64, train_subset=1024, lr_decay_epoch=120
        )
        state = train_vfe(config, split)
        assert 1 <= state.model.bottleneck.active_count < 16
        assert state.loss_trace[-1].cross_entropy < 0.5

    def test_importance_stays_nonnegative(self, toy_split):
        state = train_vfe(tiny_config(epochs=3, beta=0.05), toy_split)
        assert float(state.model.bottleneck.gamma.detach().min()) >= 0.0

    def test_gaussian_prior_trains_and_registers_parameters(self, toy_split):
        state = train(tiny_config(prior="gaussian", epochs=2), toy_split)
        assert hasattr(state.model, "prior_kl")
        assert any("prior_kl" in name for name, _ in state.model.named_parameters())

    def test_cross_entropy_decreases_early(self):
        from conftest import mnist_available

        if not mnist_available():
            pytest.skip("needs MNIST")
        from taskcomm.data import load_mnist

        train_split, _ = load_mnist()
        state = train_vfe(tiny_config(n_initial=32, epochs=5, train_subset=4000, batch_size=128), train_split)
        assert state.loss_trace[4].cross_entropy < state.loss_trace[0].cross_entropy


class TestBaselineLoops:
    def test_deep_jscc_has_no_kl_pressure(self, toy_split):
        state = train(tiny_config(variant="deep-jscc", epochs=2), toy_split)
        for record in state.loss_trace:
            assert record.total == record.cross_entropy
            assert record.active_dims == 16.0

    def test_quantization_trains_without_noise(self, toy_split):
        state = train(tiny_config(variant="quantization", bits_per_dim=2, epochs=2), toy_split)
        assert state.loss_trace[-1].kl_total == 0.0


class TestVlVfeLoop:
    def test_variant_guard(self, toy_split):
        with pytest.raises(ValueError):
            train_vl_vfe(tiny_config(variant="vfe"), toy_split)

    def test_never_permanently_prunes(self, toy_split):
        config = tiny_config(variant="vl-vfe", epochs=3, beta=0.01)
        state = train_vl_vfe(config, toy_split)
        assert state.model.bottleneck.active_count == 16  # mask untouched
        assert sum(state.pruned_history) == 0

    def test_records_the_variance_range(self, toy_split):
        config = tiny_config(variant="vl-vfe", epochs=2)
        state = train_vl_vfe(config, toy_split)
        low, high = state.model.gate.trained_sigma2_range.tolist()
        assert low == pytest.approx(config.sigma2_range[0], rel=1e-6)
        assert high == pytest.approx(config.sigma2_range[1], rel=1e-6)
        assert state.loss_trace[0].sigma2 == pytest.approx(list(config.sigma2_range), rel=1e-6)

    def test_deterministic(self, toy_split):
        config = tiny_config(variant="vl-vfe", epochs=2)
        a = train_vl_vfe(config, toy_split)
        b = train_vl_vfe(config, toy_split)
        assert [r.to_json() for r in a.loss_trace] == [r.to_json() for r in b.loss_trace]


class TestDivergenceRecovery:
    @staticmethod
    def _nan_once_wrapper(real_loss, fail_calls):
        calls = {"count": 0}

        def wrapper(*args, **kwargs):
            terms = real_loss(*args, **kwargs)
            calls["count"] += 1
            if calls["count"] in fail_calls:
                nan = terms.cross_entropy * float("nan")
                return VibLossTerms(cross_entropy=nan, kl_total=terms.kl_total, beta=terms.beta)
            return terms

        return wrapper

    def test_single_divergence_rolls_back_and_halves_lr(self, toy_split, monkeypatch, caplog):
        import logging

        real = training_module.vib_loss
        monkeypatch.setattr(training_module, "vib_loss", self._nan_once_wrapper(real, {5}))
        config = tiny_config(epochs=3)
        with caplog.at_level(logging.WARNING):
            state = train(config, toy_split)
        assert state.lr_halved
        assert state.epoch == 3
        assert "halving" in caplog.text

    def test_repeated_divergence_aborts_with_last_good_state(self, toy_split, monkeypatch):
        real = training_module.vib_loss
        monkeypatch.setattr(
            training_module, "vib_loss", self._nan_once_wrapper(real, {5, 6, 7, 8, 9, 10})
        )
        config = tiny_config(epochs=3)
        with pytest.raises(TrainingDiverged) as err:
            train(config, toy_split)
        assert err.value.state is not None
        assert err.value.state.epoch == 1  # rolled back to the last completed epoch

    def test_rolled_back_run_still_deterministic(self, toy_split, monkeypatch):
        real = training_module.vib_loss
        monkeypatch.setattr(training_module, "vib_loss", self._nan_once_wrapper(real, {5}))
        a = train(tiny_config(epochs=3), toy_split)
        monkeypatch.setattr(training_module, "vib_loss", self._nan_once_wrapper(real, {5}))
        b = train(tiny_config(epochs=3), toy_split)
        assert [r.to_json() for r in a.loss_trace] == [r.to_json() for r in b.loss_trace]


class TestResume:
    def test_resume_matches_uninterrupted_run(self, toy_split):
        from taskcomm.checkpoint import load_checkpoint, save_checkpoint
        import tempfile
        from pathlib import Path

        config = tiny_config(epochs=4)
        full = train(config, toy_split)

        partial_config = tiny_config(epochs=4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "partial.ckpt"

            def stop_after_two(state, record, seconds):
                save_checkpoint(path, state.model, partial_config, extra=state.checkpoint_extra())
                if record.epoch == 2:
                    raise KeyboardInterrupt

            with pytest.raises(KeyboardInterrupt):
                train(partial_config, toy_split, on_epoch=stop_after_two)
            payload = load_checkpoint(path)
            resumed = train(partial_config, toy_split, resume_payload=payload)

        assert [r.to_json() for r in resumed.loss_trace] == [r.to_json() for r in full.loss_trace]
        for pa, pb in zip(full.model.parameters(), resumed.model.parameters()):
            assert torch.equal(pa, pb)
