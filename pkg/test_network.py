"""
Tests for the backbone, the self-gradient block and the two-pass forward.

Run with: pytest test_network.py -v
"""

from __future__ import annotations

import numpy as np
import pytest

from errors import ContractError
from network import (
    BackboneConfig,
    OracleGradientNetwork,
    SelfGradBlockConfig,
    SGNetwork,
    build_model,
    soft_loss,
)
from tape import OpKind

SMALL = BackboneConfig(height=8, width=8, base_channels=4, depth=2)


def _batch(n: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 3, 8, 8)), rng.integers(0, 2, size=n)


class TestConfigs:
    """Validation of the frozen configs."""

    def test_rejects_single_class(self):
        with pytest.raises(ContractError, match="num_classes"):
            BackboneConfig(num_classes=1)

    def test_rejects_tiny_input(self):
        with pytest.raises(ContractError, match="at least 4"):
            BackboneConfig(height=3)

    def test_rejects_negative_block_scale(self):
        with pytest.raises(ContractError, match="eps_block"):
            SelfGradBlockConfig(eps_block=-0.1)

    def test_rejects_empty_stack(self):
        with pytest.raises(ContractError, match="stack_depth"):
            SelfGradBlockConfig(stack_depth=0)

    def test_block_channels_must_match_input(self):
        with pytest.raises(ContractError, match="channels"):
            SGNetwork(SMALL, SelfGradBlockConfig(channels=1))


class TestBlock:
    """block_forward: bias-free tanh stack scaled by eps_block."""

    def test_default_stack_has_five_layers(self):
        model = SGNetwork(SMALL)
        assert sorted(n for n in model.params if n.startswith("sg.")) == [f"sg.{i}.w" for i in range(5)]

    def test_zero_gradient_maps_to_zero(self):
        model = SGNetwork(SMALL)
        out = model.block_forward(np.zeros((2, 3, 8, 8)))
        assert np.array_equal(out, np.zeros((2, 3, 8, 8)))

    def test_output_bounded_by_eps_block(self):
        model = SGNetwork(SMALL)
        rng = np.random.default_rng(7)
        g = rng.standard_normal((1000, 3, 2, 2)) * rng.uniform(0.0, 1e3, size=(1000, 1, 1, 1))
        out = model.block_forward(g)
        assert np.abs(out).max() <= model.eps_block
        assert model.eps_block == pytest.approx(8 / 255)

    def test_channel_mismatch(self):
        model = SGNetwork(SMALL)
        with pytest.raises(ContractError, match="block expects"):
            model.block_forward(np.zeros((1, 2, 8, 8)))


class TestSoftLoss:
    """Linearity of the sum-of-logits loss."""

    def test_value(self):
        assert soft_loss(np.array([[1.0, -2.0], [0.5, 4.0]])) == pytest.approx(3.5)

    def test_gradient_wrt_logits_is_ones(self):
        model = SGNetwork(SMALL, block_enabled=False)
        x, _ = _batch()
        fg = model.build()
        root = fg.graph.sum(fg.logits)
        model.run(fg, x)
        grad = fg.graph.backward(root, targets=[fg.logits])[fg.logits]
        assert np.abs(grad - 1.0).max() <= 1e-12

    def test_input_gradient_is_sum_of_class_gradients(self):
        model = SGNetwork(SMALL, block_enabled=False)
        x, _ = _batch()
        fg = model.build()
        model.run(fg, x)
        x_leaf = fg.graph.leaves["x"]
        per_class = []
        for j in range(SMALL.num_classes):
            seed = np.zeros((len(x), SMALL.num_classes))
            seed[:, j] = 1.0
            per_class.append(fg.graph.backward(fg.logits, seed=seed, targets=[x_leaf])[x_leaf])
        total = model.soft_gradient(x)
        np.testing.assert_allclose(total, sum(per_class), rtol=1e-9, atol=1e-14)


class TestTwoPass:
    """Two-pass forward and its relation to the backbone."""

    def test_logits_shape_and_finite(self):
        x, _ = _batch(5)
        logits = SGNetwork(SMALL).two_pass_forward(x)
        assert logits.shape == (5, 2)
        assert np.isfinite(logits).all()

    def test_zero_block_scale_matches_backbone_bitwise(self):
        model = SGNetwork(SMALL, SelfGradBlockConfig(eps_block=0.0))
        x, _ = _batch()
        assert np.array_equal(model.two_pass_forward(x), model.backbone_forward(x))

    def test_disabled_block_predicts_like_backbone(self):
        model = SGNetwork(SMALL, seed=3)
        x, _ = _batch(8, seed=1)
        expected = np.argmax(model.backbone_forward(x), axis=1)
        assert np.array_equal(model.predict(x, block_enabled=False), expected)

    def test_block_changes_logits(self):
        model = SGNetwork(SMALL, seed=2)
        x, _ = _batch()
        assert not np.array_equal(model.two_pass_forward(x), model.backbone_forward(x))

    def test_wrong_input_shape(self):
        with pytest.raises(ContractError, match="expected input of shape"):
            SGNetwork(SMALL).two_pass_forward(np.zeros((1, 3, 16, 16)))

    def test_pass_one_gradient_is_a_constant(self):
        """The attack gradient equals the one taken with the pass-1 gradient frozen."""
        model = SGNetwork(SMALL, seed=4)
        x, y = _batch()
        logits, grad = model.input_gradient(x, y)
        prior = model.soft_gradient(x)
        frozen_logits, frozen_grad = model.input_gradient(x, y, prior=prior)
        np.testing.assert_allclose(logits, frozen_logits, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(grad, frozen_grad, rtol=1e-8, atol=1e-12)

    def test_more_loops_still_finite(self):
        x, _ = _batch(2)
        assert np.isfinite(SGNetwork(SMALL).two_pass_forward(x, loops=3)).all()

    def test_zero_loops_rejected(self):
        with pytest.raises(ContractError, match="loops"):
            SGNetwork(SMALL).two_pass_forward(_batch()[0], loops=0)

    def test_linear_backbone_has_constant_gradient(self):
        cfg = BackboneConfig(height=8, width=8, base_channels=4, depth=1, normalization=False,
                             activation="linear")
        model = SGNetwork(cfg)
        a, _ = _batch(2, seed=0)
        b, _ = _batch(2, seed=1)
        np.testing.assert_allclose(model.soft_gradient(a), model.soft_gradient(b), rtol=1e-10, atol=1e-12)


class TestBatchNormModes:
    """Running statistics move only in training mode."""

    def test_training_updates_buffers(self):
        model = SGNetwork(SMALL)
        before = {k: v.copy() for k, v in model.buffers.items()}
        model.train().logits(_batch()[0])
        assert any(not np.array_equal(before[k], model.buffers[k]) for k in before)

    def test_eval_leaves_buffers(self):
        model = SGNetwork(SMALL)
        before = {k: v.copy() for k, v in model.buffers.items()}
        model.eval().two_pass_forward(_batch()[0])
        assert all(np.array_equal(before[k], model.buffers[k]) for k in before)

    def test_running_stats_come_from_injected_pass(self):
        """Each batch-norm layer runs twice; only its second application feeds the buffers."""
        model = SGNetwork(SMALL, SelfGradBlockConfig(eps_block=0.5)).train()
        before = {k: v.copy() for k, v in model.buffers.items()}
        fg = model.build()
        model.run(fg, _batch()[0])
        moved = False
        for name, last in fg.bn_nodes.items():
            uses = [i for i, node in enumerate(fg.graph.nodes)
                    if node.op == OpKind.BATCH_NORM and node.name == name]
            assert len(uses) == 2 and uses[-1] == last
            first_mean = fg.graph.nodes[uses[0]].cache["batch_mean"]
            last_mean = fg.graph.nodes[last].cache["batch_mean"]
            expected = 0.9 * before[f"{name}.running_mean"] + 0.1 * last_mean
            np.testing.assert_allclose(model.buffers[f"{name}.running_mean"], expected, rtol=1e-12)
            moved = moved or not np.allclose(first_mean, last_mean)
        assert moved


class TestState:
    """Parameter bookkeeping."""

    def test_same_seed_same_parameters(self):
        assert SGNetwork(SMALL, seed=5).parameter_checksum() == SGNetwork(SMALL, seed=5).parameter_checksum()

    def test_checksum_tracks_parameters(self):
        model = SGNetwork(SMALL)
        before = model.parameter_checksum()
        model.params["head.b"] = model.params["head.b"] + 1.0
        assert model.parameter_checksum() != before

    def test_clone_is_independent(self):
        model = SGNetwork(SMALL)
        twin = model.clone()
        twin.params["head.b"][0] = 9.0
        assert model.params["head.b"][0] == 0.0

    def test_load_state_rejects_missing(self):
        model = SGNetwork(SMALL)
        state = model.state()
        state.pop("head.w")
        with pytest.raises(ContractError, match="state mismatch"):
            model.load_state(state)

    def test_astype(self):
        twin = SGNetwork(SMALL).astype(np.float32)
        assert twin.dtype == np.float32
        assert all(v.dtype == np.float32 for v in twin.params.values())

    def test_build_model_from_description(self):
        model = SGNetwork(SMALL, SelfGradBlockConfig(stack_depth=3), block_enabled=False)
        rebuilt = build_model(model.describe())
        assert isinstance(rebuilt, SGNetwork)
        assert rebuilt.block_cfg.stack_depth == 3
        assert rebuilt.block_enabled is False
        assert rebuilt.parameter_checksum() == model.parameter_checksum()

    def test_build_model_unknown_kind(self):
        with pytest.raises(ContractError, match="unknown model kind"):
            build_model({"kind": "mlp", "backbone": {}})


class TestOracleGradientNetwork:
    """Backbone with the labelled gradient as extra channels."""

    def test_needs_labels(self):
        with pytest.raises(ContractError, match="needs labels"):
            OracleGradientNetwork(SMALL).logits(_batch()[0])

    def test_six_input_channels(self):
        model = OracleGradientNetwork(SMALL)
        assert model.params["stem.w"].shape[1] == 6

    def test_logits_depend_on_labels(self):
        model = OracleGradientNetwork(SMALL, seed=1)
        x, _ = _batch(4)
        zeros, ones = np.zeros(4, dtype=int), np.ones(4, dtype=int)
        assert not np.array_equal(model.logits(x, zeros), model.logits(x, ones))

    def test_zero_oracle_ignores_labels(self):
        model = OracleGradientNetwork(SMALL, zero_oracle=True)
        x, _ = _batch(4)
        zeros, ones = np.zeros(4, dtype=int), np.ones(4, dtype=int)
        assert np.array_equal(model.logits(x, zeros), model.logits(x, ones))
