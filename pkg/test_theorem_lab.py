"""
Tests for self-gradient iteration on analytic functions and networks.

Run with: pytest test_theorem_lab.py -v
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from data_io import SyntheticConfig, synth_blobs
from errors import ContractError
from network import BackboneConfig, SelfGradBlockConfig, SGNetwork
from theorem_lab import (
    AnalyticFunc,
    IterationTrace,
    iterate_self_gradient,
    jet_mul,
    jet_tanh,
    norm_diff_series,
    quadratic_fixed_point,
    scan_eps,
)
from training import TrainConfig, train

SMALL = BackboneConfig(height=8, width=8, base_channels=4, depth=2)


def _sech2(x: float) -> float:
    return 1.0 - math.tanh(x) ** 2


class TestJets:
    """Truncated Taylor arithmetic."""

    def test_product_of_polynomials(self):
        a = np.array([[1.0, 2.0, 0.0, 0.0]])  # 1 + 2t
        b = np.array([[3.0, 0.0, 1.0, 0.0]])  # 3 + t^2
        np.testing.assert_allclose(jet_mul(a, b), [[3.0, 6.0, 1.0, 2.0]])

    def test_tanh_series_at_zero(self):
        u = np.array([[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(jet_tanh(u), [[0.0, 1.0, 0.0, -1.0 / 3.0, 0.0, 2.0 / 15.0]], atol=1e-14)


class TestAnalyticIteration:
    """iterate_self_gradient against closed forms and scalar recurrences."""

    def test_linear_differences_vanish(self):
        trace = iterate_self_gradient(AnalyticFunc.linear([2.0, -1.0]), [0.3, 0.4], eps=0.3, n_max=10)
        assert all(d == 0.0 for d in trace.deltas)
        assert all(d == 0.0 for d in trace.f_deltas[1:])
        assert trace.verdict.kind == "converged"

    def test_zero_eps_keeps_the_function(self):
        func = AnalyticFunc.tanh_sum()
        trace = iterate_self_gradient(func, [0.3, -0.7], eps=0.0, n_max=8)
        assert all(v == trace.f_values[0] for v in trace.f_values)
        assert all(d == 0.0 for d in trace.deltas)
        assert trace.f_values[0] == pytest.approx(func.value([0.3, -0.7]), abs=1e-15)

    def test_quadratic_reaches_fixed_point(self):
        trace = iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.1, n_max=50)
        assert trace.verdict.kind == "converged"
        assert trace.final_f == pytest.approx(0.6350833, abs=1e-6)
        assert trace.final_f == pytest.approx(quadratic_fixed_point(0.1) / 2, abs=1e-9)
        assert trace.contraction_ratio < 1.0

    @pytest.mark.parametrize("func, x0, eps", [
        (AnalyticFunc.quadratic(), 1.0, 0.1),
        (AnalyticFunc.scaled_quadratic(2.0), 1.5, 0.05),
    ])
    def test_converging_deltas_never_grow(self, func, x0, eps):
        trace = iterate_self_gradient(func, x0, eps=eps, n_max=50)
        assert trace.verdict.kind == "converged"
        deltas = trace.deltas
        assert deltas[0] > 0
        assert all(b <= a + 1e-12 for a, b in zip(deltas, deltas[1:]))

    def test_quadratic_half_diverges_when_forced(self):
        trace = iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.5, n_max=20, force=True)
        assert trace.verdict.kind == "diverged"
        assert trace.verdict.step <= 20
        assert trace.forced is False  # 0.5 lies inside [0, 1)
        assert trace.f_values[1] == pytest.approx(2.25 / 2)
        assert trace.f_values[2] == pytest.approx((1 + 0.5 * 2.25) ** 2 / 2)

    def test_scaled_quadratic_matches_recurrence(self):
        k, eps, x0 = 2.0, 0.05, 1.5
        trace = iterate_self_gradient(AnalyticFunc.scaled_quadratic(k), x0, eps=eps, n_max=10)
        c = k
        expected = [c * x0 ** 2 / 2]
        for _ in range(10):
            c = k * (1 + eps * c) ** 2
            expected.append(c * x0 ** 2 / 2)
        np.testing.assert_allclose(trace.f_values, expected, rtol=1e-12)

    def test_tanh_first_two_iterates(self):
        x, eps = 0.4, 0.2
        trace = iterate_self_gradient(AnalyticFunc.tanh_sum(), x, eps=eps, n_max=4)
        inner = x + eps * _sech2(x)
        f1 = math.tanh(inner)
        df1 = _sech2(inner) * (1 - 2 * eps * _sech2(x) * math.tanh(x))
        f2 = math.tanh(x + eps * df1)
        assert trace.f_values[1] == pytest.approx(f1, rel=1e-12)
        assert trace.records[1].grad[0] == pytest.approx(df1, rel=1e-12)
        assert trace.f_values[2] == pytest.approx(f2, rel=1e-12)

    def test_polynomial_equals_quadratic(self):
        poly = iterate_self_gradient(AnalyticFunc.polynomial([0.0, 0.0, 0.5]), 1.0, eps=0.1, n_max=12)
        quad = iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.1, n_max=12)
        np.testing.assert_allclose(poly.f_values, quad.f_values, rtol=1e-13)

    def test_eps_out_of_range(self):
        with pytest.raises(ContractError, match="eps must lie"):
            iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=1.0)

    def test_force_records_out_of_range(self):
        trace = iterate_self_gradient(AnalyticFunc.linear(1.0), 0.0, eps=1.5, n_max=3, force=True)
        assert trace.forced is True

    def test_too_few_steps(self):
        with pytest.raises(ContractError, match="n_max"):
            iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.1, n_max=1)

    def test_linear_slope_length_checked(self):
        with pytest.raises(ContractError, match="slope"):
            iterate_self_gradient(AnalyticFunc.linear([1.0, 2.0]), [1.0, 2.0, 3.0], eps=0.1, n_max=3)


class TestFixedPoint:
    """Real roots of c = (1 + eps c)^2."""

    def test_eps_zero(self):
        assert quadratic_fixed_point(0.0) == 1.0

    def test_boundary_double_root(self):
        assert quadratic_fixed_point(0.25) == pytest.approx(4.0)

    def test_no_root_beyond_quarter(self):
        assert quadratic_fixed_point(0.3) is None

    def test_scan(self):
        rows = scan_eps(AnalyticFunc.quadratic(), 1.0, [0.1, 0.5], n_max=20)
        assert [r["verdict"] for r in rows] == ["converged", "diverged"]


class TestTraceExport:
    """CSV and JSON forms of a trace."""

    def test_csv(self, tmp_path):
        trace = iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.1, n_max=50)
        lines = trace.to_csv(tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,f_value,grad_norm,delta"
        assert lines[1] == "0,0.5,1,"
        assert lines[-1].split(",")[1] == "0.635083"
        assert len(lines) == 52

    def test_json_reload(self):
        trace = iterate_self_gradient(AnalyticFunc.quadratic(), 1.0, eps=0.5, n_max=20, force=True)
        again = IterationTrace.model_validate_json(trace.model_dump_json())
        assert again.verdict == trace.verdict
        assert again.f_values == trace.f_values


class TestNormDiffSeries:
    """Repeated gradient injection through a network's block."""

    def test_zero_block_settles_after_one_step(self):
        model = SGNetwork(SMALL, SelfGradBlockConfig(eps_block=0.0))
        x = np.random.default_rng(0).uniform(0, 1, size=(4, 3, 8, 8))
        series = norm_diff_series(model, x, n=4)
        assert series.per_sample.shape == (4, 4)
        assert series.mean[0] > 0
        assert np.all(series.mean[1:] == 0.0)
        assert series.rapid_decay()

    def test_linear_backbone_settles_after_one_step(self):
        linear = BackboneConfig(height=8, width=8, base_channels=4, depth=2, activation="linear")
        model = SGNetwork(linear, seed=2)
        x = np.random.default_rng(5).uniform(0.1, 0.9, size=(6, 3, 8, 8))
        series = norm_diff_series(model, x, n=5)
        assert series.mean[0] > 0
        np.testing.assert_allclose(series.mean[1:], 0.0, atol=1e-9 * series.mean[0])

    @pytest.mark.slow
    def test_trained_network_decays_rapidly(self):
        blobs = synth_blobs(SyntheticConfig(per_class=48, extent=8, seed=8))
        train_set, held_out = blobs.split(64)
        model = SGNetwork(SMALL, seed=3)
        train(model, train_set, TrainConfig(mode="selfgrad_onestep", epochs=3, batch_size=16))
        series = norm_diff_series(model, held_out.head(32).images, n=10)
        assert series.mean[1] < series.mean[0]
        assert series.mean[9] <= 0.1 * series.mean[0]
        assert series.rapid_decay()

    def test_pairs_and_rows(self):
        model = SGNetwork(SMALL, SelfGradBlockConfig(eps_block=0.0))
        x = np.random.default_rng(1).uniform(0, 1, size=(2, 3, 8, 8))
        series = norm_diff_series(model, x, n=3)
        assert [k for k, _ in series.pairs] == [1, 2, 3]
        assert [r["step"] for r in series.rows()] == [1, 2, 3]

    def test_mode_restored(self):
        model = SGNetwork(SMALL).train()
        norm_diff_series(model, np.full((2, 3, 8, 8), 0.5), n=2)
        assert model.training is True

    def test_needs_two_steps(self):
        with pytest.raises(ContractError, match="at least 2"):
            norm_diff_series(SGNetwork(SMALL), np.zeros((1, 3, 8, 8)), n=1)
