"""
Central finite-difference oracle for TapeGraph gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog

from errors import ContractError
from tape import NodeId, TapeGraph, Tensor

log = structlog.get_logger()

SMALL = 1e-8


@dataclass(frozen=True)
class GradCheckReport:
    leaf: str
    max_rel_err: float
    worst_index: Tuple[int, ...]
    analytic: Tensor
    numeric: Tensor
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_errors(analytic: Tensor, numeric: Tensor) -> Tensor:
    """|a-n| / max(|a|, |n|, 1e-8); coordinates that are both tiny are compared absolutely."""
    a, n = np.abs(analytic), np.abs(numeric)
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.maximum(a, n), SMALL)
    tiny = (a < SMALL) & (n < SMALL)
    return np.where(tiny, np.where(diff <= SMALL, 0.0, np.inf), rel)


def finite_diff_check(graph: TapeGraph, leaf: str, h: float = 1e-5, tol: float = 1e-4,
                      root: Optional[NodeId] = None) -> GradCheckReport:
    """Compare grad_wrt(root, leaf) with central differences (f(x+h)-f(x-h))/2h.

    The graph must already have been evaluated; its recorded bindings are
    replayed with one coordinate of ``leaf`` perturbed at a time. The graph is
    re-evaluated at the original bindings before returning.
    """
    if not h > 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    if not graph.bindings:
        raise ContractError("run forward before checking gradients")
    root = len(graph) - 1 if root is None else root
    base = np.asarray(graph.bindings[leaf])
    if base.dtype != np.float64:
        raise ContractError(f"gradient checks need 64-bit leaves, {leaf!r} is {base.dtype}")

    analytic = graph.grad_wrt(root, leaf)
    original = dict(graph.bindings)
    probe = base.copy()
    trial = dict(original)
    trial[leaf] = probe
    numeric = np.zeros_like(base)
    for i in range(base.size):
        saved = probe.flat[i]
        probe.flat[i] = saved + h
        f_plus = float(graph.forward(trial, root))
        probe.flat[i] = saved - h
        f_minus = float(graph.forward(trial, root))
        probe.flat[i] = saved
        numeric.flat[i] = (f_plus - f_minus) / (2 * h)
    graph.forward(original)

    errs = relative_errors(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(errs)), errs.shape) if errs.ndim else ()
    report = GradCheckReport(leaf, float(errs.max()), tuple(int(i) for i in worst),
                             analytic, numeric, tol)
    log.debug("gradient check", leaf=leaf, max_rel_err=report.max_rel_err, passed=report.passed)
    return report
