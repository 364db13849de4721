"""
Iterating self-gradient maps.

For f: R^d -> R and a step 0 <= eps < 1 the self-gradient iterates are

    f^0 = f,    f^n(x) = f(x + eps * grad f^{n-1}(x)).

Every analytic function here is a sum of one scalar function per
coordinate, so each iterate is too: f^n(x) = sum_i psi_n(x_i). The iterates
are evaluated exactly with truncated Taylor jets (forward-mode AD): psi_n
needs the derivative of psi_{n-1}, which needs the second derivative of
psi_{n-2}, and so on, so the starting jet carries n_max + 1 orders and each
step consumes one.

The network counterpart, ``norm_diff_series``, repeats the block injection
of a trained SGNetwork starting from a zero gradient and records how much
the soft-loss input gradient still moves at each step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict

from errors import ContractError
from network import SGNetwork
from tape import Tensor

log = structlog.get_logger()

DEFAULT_TOL = 1e-6
DEFAULT_BOUND = 1e6
RATIO_FLOOR = 1e-10

Jet = np.ndarray  # (d, order + 1) Taylor coefficients per coordinate


def jet_mul(a: Jet, b: Jet) -> Jet:
    """Truncated Cauchy product of two jets of the same length."""
    out = np.zeros_like(a)
    n = a.shape[1]
    for i in range(n):
        out[:, i:] += a[:, i:i + 1] * b[:, :n - i]
    return out


def jet_tanh(u: Jet) -> Jet:
    """tanh of a jet via y' = (1 - y^2) u'."""
    n = u.shape[1]
    y = np.zeros_like(u)
    z = np.zeros_like(u)
    y[:, 0] = np.tanh(u[:, 0])
    z[:, 0] = 1.0 - y[:, 0] ** 2
    ramp = np.arange(1, n)
    for k in range(1, n):
        y[:, k] = (ramp[:k] * u[:, 1:k + 1] * z[:, k - 1::-1]).sum(axis=1) / k
        z[:, k] = -(y[:, :k + 1] * y[:, k::-1]).sum(axis=1)
    return y


def jet_derivative(c: Jet) -> Jet:
    """Jet of the derivative; one order shorter."""
    return c[:, 1:] * np.arange(1, c.shape[1])


FuncKind = Literal["linear", "quadratic", "scaled_quadratic", "tanh_sum", "polynomial"]


@dataclass(frozen=True)
class AnalyticFunc:
    """Coordinate-separable test function with closed-form value and gradient.

    ``a`` is the slope of ``linear`` (one value, or one per coordinate), ``k``
    the curvature of ``scaled_quadratic`` and ``coeffs`` the coefficients of
    ``polynomial`` in increasing degree.
    """

    kind: FuncKind
    a: Tuple[float, ...] = (1.0,)
    k: float = 1.0
    coeffs: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "quadratic", "scaled_quadratic", "tanh_sum", "polynomial"):
            raise ContractError(f"unknown function {self.kind!r}")
        if self.kind == "polynomial" and not self.coeffs:
            raise ContractError("polynomial needs at least one coefficient")

    @classmethod
    def linear(cls, a: Union[float, Sequence[float]] = 1.0) -> "AnalyticFunc":
        return cls("linear", a=tuple(np.atleast_1d(np.asarray(a, dtype=float)).tolist()))

    @classmethod
    def quadratic(cls) -> "AnalyticFunc":
        return cls("quadratic")

    @classmethod
    def scaled_quadratic(cls, k: float) -> "AnalyticFunc":
        return cls("scaled_quadratic", k=float(k))

    @classmethod
    def tanh_sum(cls) -> "AnalyticFunc":
        return cls("tanh_sum")

    @classmethod
    def polynomial(cls, coeffs: Sequence[float]) -> "AnalyticFunc":
        return cls("polynomial", coeffs=tuple(float(c) for c in coeffs))

    @property
    def label(self) -> str:
        if self.kind == "linear":
            return f"linear(a={list(self.a)})"
        if self.kind == "scaled_quadratic":
            return f"scaled_quadratic(k={self.k})"
        if self.kind == "polynomial":
            return f"polynomial({list(self.coeffs)})"
        return self.kind

    def _slope(self, d: int) -> np.ndarray:
        a = np.asarray(self.a, dtype=float)
        if a.size not in (1, d):
            raise ContractError(f"linear slope has {a.size} entries for a {d}-vector")
        return np.broadcast_to(a, (d,))

    def value(self, x: Sequence[float]) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "linear":
            return float(np.dot(self._slope(x.size), x))
        if self.kind == "quadratic":
            return float(0.5 * np.dot(x, x))
        if self.kind == "scaled_quadratic":
            return float(0.5 * self.k * np.dot(x, x))
        if self.kind == "tanh_sum":
            return float(np.tanh(x).sum())
        return float(np.polynomial.polynomial.polyval(x, self.coeffs).sum())

    def gradient(self, x: Sequence[float]) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "linear":
            return self._slope(x.size).copy()
        if self.kind == "quadratic":
            return x.copy()
        if self.kind == "scaled_quadratic":
            return self.k * x
        if self.kind == "tanh_sum":
            return 1.0 - np.tanh(x) ** 2
        return np.polynomial.polynomial.polyval(x, np.polynomial.polynomial.polyder(self.coeffs))

    def compose(self, u: Jet) -> Jet:
        """Per-coordinate function applied to a jet."""
        if self.kind == "linear":
            return self._slope(u.shape[0])[:, None] * u
        if self.kind == "quadratic":
            return 0.5 * jet_mul(u, u)
        if self.kind == "scaled_quadratic":
            return 0.5 * self.k * jet_mul(u, u)
        if self.kind == "tanh_sum":
            return jet_tanh(u)
        out = np.zeros_like(u)
        for c in reversed(self.coeffs):
            out = jet_mul(out, u)
            out[:, 0] += c
        return out


# --------------------------------------------------------------------------
# Traces
# --------------------------------------------------------------------------

class StepRecord(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    step: int
    f_value: float
    grad: List[float]
    grad_norm: float
    delta: Optional[float] = None
    f_delta: Optional[float] = None


class Verdict(BaseModel):
    kind: Literal["converged", "diverged", "max_steps"]
    step: Optional[int] = None
    tol: Optional[float] = None
    bound: Optional[float] = None


class IterationTrace(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    func: str
    eps: float
    x0: List[float]
    n_max: int
    tol: float
    diverge_bound: float
    forced: bool = False
    records: List[StepRecord] = []
    verdict: Verdict

    @property
    def f_values(self) -> List[float]:
        return [r.f_value for r in self.records]

    @property
    def deltas(self) -> List[float]:
        return [r.delta for r in self.records[1:]]

    @property
    def f_deltas(self) -> List[float]:
        return [r.f_delta for r in self.records[1:]]

    @property
    def final_f(self) -> float:
        return self.records[-1].f_value

    @property
    def contraction_ratio(self) -> Optional[float]:
        """Largest observed Delta_k / Delta_{k-1} over k >= 2 (the measured eps*L).

        Differences at rounding level (below 1e-10 of the largest) are skipped.
        """
        deltas = self.deltas
        if len(deltas) < 2 or not all(math.isfinite(d) for d in deltas):
            return None
        floor = RATIO_FLOOR * max(deltas)
        ratios = [b / a for a, b in zip(deltas, deltas[1:]) if a > floor]
        return max(ratios) if ratios else None

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "f_value", "grad_norm", "delta"])
            for r in self.records:
                writer.writerow([r.step, f"{r.f_value:.6g}", f"{r.grad_norm:.6g}",
                                 "" if r.delta is None else f"{r.delta:.6g}"])
        return path


def _verdict(records: List[StepRecord], tol: float) -> Verdict:
    if len(records) < 2 or records[-1].f_delta > tol:
        return Verdict(kind="max_steps", step=len(records) - 1, tol=tol)
    settled = len(records) - 1
    while settled > 1 and records[settled - 1].f_delta <= tol:
        settled -= 1
    return Verdict(kind="converged", step=settled, tol=tol)


def iterate_self_gradient(f: AnalyticFunc, x0: Union[float, Sequence[float]], eps: float,
                          n_max: int = 50, tol: float = DEFAULT_TOL,
                          diverge_bound: float = DEFAULT_BOUND, force: bool = False) -> IterationTrace:
    """Run n_max self-gradient steps from x0 and classify the outcome.

    Diverged stops at the first step whose value leaves the bound (or is not
    finite). Otherwise all steps run; the trace is converged when the last
    value difference is within ``tol``, with the verdict step set to the
    first step from which every later difference stays within ``tol``.
    """
    if not (0.0 <= eps < 1.0) and not force:
        raise ContractError(f"eps must lie in [0, 1), got {eps} (use force for boundary studies)")
    if n_max < 2:
        raise ContractError(f"n_max must be at least 2, got {n_max}")
    x = np.atleast_1d(np.asarray(x0, dtype=float))

    order = n_max + 1
    identity = np.zeros((x.size, order + 1))
    identity[:, 0] = x
    identity[:, 1] = 1.0
    records: List[StepRecord] = []
    verdict: Optional[Verdict] = None
    with np.errstate(over="ignore", invalid="ignore"):
        psi = f.compose(identity)
        for step in range(n_max + 1):
            if step > 0:
                deriv = jet_derivative(psi)
                psi = f.compose(identity[:, :deriv.shape[1]] + eps * deriv)
            value = float(psi[:, 0].sum())
            grad = psi[:, 1].copy()
            record = StepRecord(step=step, f_value=value, grad=grad.tolist(),
                                grad_norm=float(np.linalg.norm(grad)))
            if records:
                prev = records[-1]
                record.delta = float(np.linalg.norm(grad - np.asarray(prev.grad)))
                record.f_delta = abs(value - prev.f_value)
            records.append(record)
            if not math.isfinite(value) or abs(value) > diverge_bound:
                verdict = Verdict(kind="diverged", step=step, bound=diverge_bound)
                break
    if verdict is None:
        verdict = _verdict(records, tol)
    trace = IterationTrace(func=f.label, eps=eps, x0=x.tolist(), n_max=n_max, tol=tol,
                           diverge_bound=diverge_bound, forced=not (0.0 <= eps < 1.0),
                           records=records, verdict=verdict)
    log.debug("self-gradient iteration", func=f.label, eps=eps, verdict=verdict.kind, step=verdict.step)
    return trace


def quadratic_fixed_point(eps: float) -> Optional[float]:
    """Smaller root c* of c = (1 + eps c)^2, or None when no real root exists.

    For f = x^2/2 the iterates are f^n(x) = c_n x^2 / 2 with
    c_n = (1 + eps c_{n-1})^2, c_0 = 1; a real root exists iff eps <= 1/4.
    """
    if eps == 0:
        return 1.0
    disc = (1 - 2 * eps) ** 2 - 4 * eps * eps
    if disc < 0:
        return None
    return ((1 - 2 * eps) - math.sqrt(disc)) / (2 * eps * eps)


def scan_eps(f: AnalyticFunc, x0: Union[float, Sequence[float]], eps_values: Sequence[float],
             n_max: int = 50, tol: float = DEFAULT_TOL,
             diverge_bound: float = DEFAULT_BOUND) -> List[Dict[str, object]]:
    """Empirical convergence region: one verdict row per eps."""
    rows = []
    for eps in eps_values:
        trace = iterate_self_gradient(f, x0, eps, n_max, tol, diverge_bound, force=True)
        rows.append({
            "eps": eps,
            "verdict": trace.verdict.kind,
            "step": trace.verdict.step,
            "final_f": trace.final_f,
            "contraction_ratio": trace.contraction_ratio if trace.contraction_ratio is not None else float("nan"),
        })
    return rows


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

@dataclass
class NormDiffSeries:
    """Delta_k = ||g_k - g_{k-1}||_2 for k = 1..n, per sample and averaged."""

    per_sample: np.ndarray  # (n, batch)
    mean: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.mean = self.per_sample.mean(axis=1)

    @property
    def pairs(self) -> List[Tuple[int, float]]:
        return [(k + 1, float(d)) for k, d in enumerate(self.mean)]

    def rapid_decay(self, ratio: float = 0.1) -> bool:
        """Delta_2 < Delta_1 and the last Delta is at most ratio * Delta_1."""
        d = self.mean
        return bool(d[1] < d[0] and d[-1] <= ratio * d[0])

    def rows(self) -> List[Dict[str, float]]:
        return [{"step": k, "delta": d} for k, d in self.pairs]


def norm_diff_series(model: SGNetwork, x: Tensor, n: int = 10) -> NormDiffSeries:
    """Re-inject the previous soft-loss gradient through the block n times.

    g_0 = 0 and g_k is the soft-loss input gradient of the backbone applied to
    clamp(x + block(standardize(g_{k-1}))). The model is evaluated with frozen
    statistics and left in the mode it came in.
    """
    if n < 2:
        raise ContractError(f"need at least 2 steps, got {n}")
    was_training = model.training
    model.eval()
    try:
        prev = np.zeros_like(np.asarray(x, dtype=model.dtype))
        deltas = []
        for k in range(1, n + 1):
            cur = model.soft_gradient(x, prior=prev)
            deltas.append(np.sqrt(((cur - prev) ** 2).reshape(len(x), -1).sum(axis=1)))
            prev = cur
    finally:
        model.train(was_training)
    series = NormDiffSeries(np.stack(deltas))
    log.info("norm-difference series", steps=n, first=float(series.mean[0]), last=float(series.mean[-1]))
    return series
