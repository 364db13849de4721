"""
Tests for the optimizer, the three training regimes and the oracle-gradient
experiment.

Run with: pytest test_training.py -v
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from attacks import AttackConfig, attack_success_rate
from checkpoint import Checkpoint
from data_io import SyntheticConfig, synth_blobs
from errors import ContractError, DivergenceError
from network import BackboneConfig, OracleGradientNetwork, SGNetwork
from training import (
    SGD,
    MetricsLog,
    MetricsRow,
    OptimizerConfig,
    TrainConfig,
    lr_at,
    oracle_gradient_experiment,
    train,
)

SMALL = BackboneConfig(height=8, width=8, base_channels=4, depth=1)


@pytest.fixture(scope="module")
def data():
    full = synth_blobs(SyntheticConfig(per_class=20, extent=8, seed=3))
    return full.split(32)


def _model(**kwargs) -> SGNetwork:
    return SGNetwork(SMALL, dtype=np.float32, **kwargs)


class TestSchedule:
    """Step decay of the learning rate."""

    @pytest.mark.parametrize("epoch, expected", [(0, 0.1), (49, 0.1), (50, 0.01), (100, 0.001), (150, 1e-4)])
    def test_lr_at(self, epoch, expected):
        assert lr_at(epoch, OptimizerConfig()) == pytest.approx(expected)

    def test_negative_epoch(self):
        with pytest.raises(ContractError, match="non-negative"):
            lr_at(-1, OptimizerConfig())

    def test_invalid_optimizer(self):
        with pytest.raises(ContractError, match="learning rate"):
            OptimizerConfig(lr=0.0)
        with pytest.raises(ContractError, match="decay factor"):
            OptimizerConfig(decay_factor=1.0)


class TestSGD:
    """Momentum update by hand."""

    def test_two_steps(self):
        params = {"w": np.array([1.0])}
        opt = SGD(params, OptimizerConfig(weight_decay=0.0))
        opt.step(params, {"w": np.array([0.5])}, lr=0.1)
        assert params["w"][0] == pytest.approx(0.95)
        opt.step(params, {"w": np.array([0.5])}, lr=0.1)
        assert params["w"][0] == pytest.approx(0.855)

    def test_plain_step(self):
        params = {"w": np.array([1.0])}
        SGD(params, OptimizerConfig(momentum=0.0, weight_decay=0.0)).step(params, {"w": np.array([2.0])}, lr=0.1)
        assert params["w"][0] == pytest.approx(0.8)

    def test_weight_decay_pulls_to_zero(self):
        params = {"w": np.array([2.0])}
        SGD(params, OptimizerConfig(momentum=0.0, weight_decay=0.5)).step(params, {"w": np.array([0.0])}, lr=0.1)
        assert params["w"][0] == pytest.approx(1.9)


class TestTrainConfig:
    """Regime selection."""

    def test_unknown_mode(self):
        with pytest.raises(ContractError, match="mode"):
            TrainConfig(mode="trades")

    def test_madry_needs_steps(self):
        with pytest.raises(ContractError, match="madry_pgd"):
            TrainConfig(mode="madry_pgd", pgd_steps=0)

    def test_selfgrad_attack_is_one_step(self):
        attack = TrainConfig(mode="selfgrad_onestep", attack=AttackConfig(steps=10)).train_attack()
        assert attack.steps == 1
        assert attack.step_size == attack.eps

    def test_selfgrad_needs_positive_eps(self):
        with pytest.raises(ContractError, match="must be positive"):
            TrainConfig(mode="selfgrad_onestep", attack=AttackConfig(eps=0.0))

    def test_madry_attack(self):
        assert TrainConfig(mode="madry_pgd", pgd_steps=7).train_attack().steps == 7

    def test_standard_has_no_attack(self):
        assert TrainConfig().train_attack() is None


class TestMetricsLog:
    """Per-epoch rows."""

    def test_epochs_must_increase(self):
        log = MetricsLog()
        log.append(MetricsRow(1, 0.5, 0.5, 0.5, 0.5, 1.0))
        with pytest.raises(ContractError, match="does not follow"):
            log.append(MetricsRow(1, 0.4, 0.6, 0.5, 0.5, 1.0))

    def test_timing_can_be_dropped(self):
        log = MetricsLog([MetricsRow(1, 0.5, 0.5, 0.5, 0.5, 1.0)])
        assert "seconds" not in log.as_dicts(include_timing=False)[0]
        assert "seconds" in log.as_dicts()[0]

    def test_csv(self, tmp_path):
        log = MetricsLog([MetricsRow(1, 0.25, 0.5, 0.75, 0.125, 2.0)])
        lines = log.to_csv(tmp_path / "m.csv").read_text().splitlines()
        assert lines == ["epoch,train_loss,train_acc,val_clean_acc,val_adv_acc,seconds",
                         "1,0.25,0.5,0.75,0.125,2"]


class TestTrain:
    """End-to-end loops on a tiny synthetic set."""

    def test_standard(self, data):
        train_set, val = data
        result = train(_model(block_enabled=False), train_set, TrainConfig(epochs=2, batch_size=8, probe_samples=4,
                                                                           probe_steps=1), val)
        assert [r.epoch for r in result.metrics.rows] == [1, 2]
        assert result.batches == 8
        assert result.attack_steps == 0
        assert isinstance(result.checkpoint, Checkpoint)
        assert result.checkpoint.metadata == {"epoch": 2, "seed": 0, "mode": "standard"}
        assert all(np.isfinite(r.train_loss) for r in result.metrics.rows)
        assert 0.0 <= result.metrics.rows[-1].val_adv_acc <= 1.0

    def test_attack_step_counters(self, data):
        train_set, _ = data
        cfg = TrainConfig(epochs=1, batch_size=16, probe_samples=0)
        one_step = train(_model(), train_set, replace(cfg, mode="selfgrad_onestep"))
        madry = train(_model(block_enabled=False), train_set,
                      replace(cfg, mode="madry_pgd", pgd_steps=10))
        assert one_step.attack_steps == one_step.batches == 2
        assert madry.attack_steps == 10 * madry.batches

    def test_deterministic(self, data):
        train_set, _ = data
        cfg = TrainConfig(mode="selfgrad_onestep", epochs=1, batch_size=8, seed=5, probe_samples=0)
        a = train(_model(), train_set, cfg)
        b = train(_model(), train_set, cfg)
        assert a.model.parameter_checksum() == b.model.parameter_checksum()
        assert a.metrics.as_dicts(include_timing=False) == b.metrics.as_dicts(include_timing=False)
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()

    def test_validation_untouched(self, data):
        train_set, val = data
        before = val.checksum()
        train(_model(), train_set, TrainConfig(mode="selfgrad_onestep", epochs=1, batch_size=16, probe_samples=4,
                                               probe_steps=1), val)
        assert val.checksum() == before

    def test_selfgrad_needs_block(self, data):
        with pytest.raises(ContractError, match="block enabled"):
            train(_model(block_enabled=False), data[0], TrainConfig(mode="selfgrad_onestep"))

    def test_oracle_flag_must_match_model(self, data):
        with pytest.raises(ContractError, match="oracle_gradient_input"):
            train(OracleGradientNetwork(SMALL, dtype=np.float32), data[0], TrainConfig())

    def test_divergence_carries_last_good(self, data):
        train_set, _ = data
        cfg = TrainConfig(epochs=3, batch_size=8, probe_samples=0, optimizer=OptimizerConfig(lr=1e30))
        with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="diverged") as info:
            train(_model(block_enabled=False), train_set, cfg)
        assert isinstance(info.value.last_good, Checkpoint)
        assert info.value.epoch >= 1

    def test_standard_fits_blobs(self):
        blobs = synth_blobs(SyntheticConfig(per_class=40, extent=8, seed=6))
        cfg = TrainConfig(epochs=15, batch_size=16, optimizer=OptimizerConfig(lr=0.05))
        result = train(_model(block_enabled=False), blobs, cfg)
        assert result.metrics.rows[-1].train_acc >= 0.95

    def test_augmented_run(self, data):
        result = train(_model(block_enabled=False), data[0],
                       TrainConfig(epochs=1, batch_size=16, probe_samples=0, augment=True))
        assert result.batches == 2


class TestOracleExperiment:
    """Training with and without the labelled gradient as input."""

    def test_report_rows(self, data):
        train_set, test_set = data
        report = oracle_gradient_experiment(train_set, test_set.head(4), TrainConfig(epochs=1, batch_size=16,
                                                                                    probe_samples=0),
                                            SMALL, eval_attack=AttackConfig(steps=1))
        assert [r["arm"] for r in report.rows()] == ["with_grad", "without_grad"]
        assert report.adv_gap == pytest.approx(report.with_grad["adv_acc"] - report.without_grad["adv_acc"])
        for arm in (report.with_grad, report.without_grad):
            assert 0.0 <= arm["clean_acc"] <= 1.0


@pytest.mark.slow
class TestRobustnessDirection:
    """Trained on blobs, each regime moves PGD accuracy the expected way."""

    @pytest.fixture(scope="class")
    def blobs(self):
        return synth_blobs(SyntheticConfig(per_class=80, extent=8, seed=9)).split(128)

    def test_selfgrad_beats_standard_under_pgd(self, blobs):
        train_set, test_set = blobs
        eps = 0.15
        base = TrainConfig(epochs=8, batch_size=16, attack=AttackConfig(eps=eps),
                           optimizer=OptimizerConfig(lr=0.05))
        standard = train(_model(block_enabled=False), train_set, base).model
        selfgrad = train(_model(), train_set, replace(base, mode="selfgrad_onestep")).model
        pgd10 = AttackConfig(eps=eps, steps=10, step_size=eps / 4)
        standard_acc = attack_success_rate(standard, test_set, pgd10, "pgd").adv_acc
        selfgrad_acc = attack_success_rate(selfgrad, test_set, pgd10, "pgd").adv_acc
        assert selfgrad_acc > standard_acc

    def test_oracle_gradient_widens_adversarial_gap(self, blobs):
        train_set, test_set = blobs
        eps = 0.25
        cfg = TrainConfig(epochs=8, batch_size=16, attack=AttackConfig(eps=eps),
                          optimizer=OptimizerConfig(lr=0.05))
        report = oracle_gradient_experiment(train_set, test_set, cfg, SMALL, dtype=np.float64,
                                            eval_attack=AttackConfig(eps=eps, steps=10, step_size=eps / 4))
        assert report.adv_gap >= 0.10
