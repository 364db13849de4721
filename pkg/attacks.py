"""
White-box L-infinity attacks on TapeModel classifiers.

All attacks work on [0, 1] images. PGD takes signed-gradient steps, clamps
to the image domain and projects back into the eps-ball around the clean
input; CW is the same loop maximising the clipped logit margin instead of
cross-entropy. Models are only read, never updated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from errors import ContractError
from network import SGNetwork, TapeModel
from tape import Tensor, log_softmax, margin_of

log = structlog.get_logger()

LOSS_KINDS = ("cross_entropy", "cw_margin")
ATTACKS = ("fgsm", "pgd", "cw")
ATTACK_BATCH = 128


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 8 / 255
    steps: int = 10
    step_size: float = 2 / 255
    random_start: bool = True
    loss_kind: str = "cross_entropy"
    cw_kappa: float = 0.0
    track_best: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eps < 0:
            raise ContractError(f"eps must be non-negative, got {self.eps}")
        if self.step_size <= 0:
            raise ContractError(f"step size must be positive, got {self.step_size}")
        if self.steps < 1:
            raise ContractError(f"steps must be at least 1, got {self.steps}")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.cw_kappa < 0:
            raise ContractError(f"cw_kappa must be non-negative, got {self.cw_kappa}")

    def with_(self, **changes: Any) -> "AttackConfig":
        return replace(self, **changes)


@dataclass
class AdvExample:
    x: Tensor
    x_adv: Tensor
    y: np.ndarray
    loss_trajectory: np.ndarray  # (iterates, batch); row 0 is the starting point
    adv_pred: np.ndarray
    gradient_steps: int = 1
    _clean_pred: Optional[np.ndarray] = field(default=None, repr=False)
    _clean_logits: Optional[Callable[[], Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def clean_pred(self) -> np.ndarray:
        """Clean predictions, computed on first access when the attack did not see them."""
        if self._clean_pred is None:
            self._clean_pred = np.argmax(self._clean_logits(), axis=1)
        return self._clean_pred

    @property
    def success(self) -> np.ndarray:
        return self.adv_pred != self.y

    @property
    def linf(self) -> np.ndarray:
        return np.abs(self.x_adv - self.x).reshape(len(self.x), -1).max(axis=1)


def margin(logits: Tensor, y: np.ndarray) -> np.ndarray:
    """Best wrong-class logit minus true-class logit, per sample."""
    return margin_of(np.atleast_2d(logits), np.atleast_1d(y))[0]


def cw_loss(logits: Tensor, y: np.ndarray, kappa: float = 0.0) -> np.ndarray:
    """max(l_y - max_{i != y} l_i, -kappa): the quantity a CW attack drives down."""
    return np.maximum(-margin(logits, y), -kappa)


def attack_objective(logits: Tensor, y: np.ndarray, loss_kind: str, kappa: float = 0.0) -> np.ndarray:
    """Per-sample objective the attack maximises."""
    if loss_kind == "cross_entropy":
        return -log_softmax(logits)[np.arange(len(y)), y]
    return np.minimum(margin(logits, y), kappa)


def project_linf(candidate: Tensor, origin: Tensor, eps: float) -> Tensor:
    """Nearest point of the eps-ball around ``origin``, clamped to [0, 1]."""
    if np.shape(candidate) != np.shape(origin):
        raise ContractError(f"shape mismatch: {np.shape(candidate)} vs {np.shape(origin)}")
    return np.clip(np.minimum(np.maximum(candidate, origin - eps), origin + eps), 0.0, 1.0)


def fgsm(model: TapeModel, x: Tensor, y: np.ndarray, eps: float = 8 / 255) -> AdvExample:
    x = np.asarray(x)
    y = np.asarray(y)
    logits, grad = model.input_gradient(x, y, "cross_entropy")
    x_adv = np.clip(x + eps * np.sign(grad), 0.0, 1.0)
    adv_logits = model.logits(x_adv, y)
    return AdvExample(
        x=x, x_adv=x_adv, y=y,
        loss_trajectory=np.stack([attack_objective(logits, y, "cross_entropy"),
                                  attack_objective(adv_logits, y, "cross_entropy")]),
        adv_pred=np.argmax(adv_logits, axis=1), _clean_pred=np.argmax(logits, axis=1),
    )


def pgd(model: TapeModel, x: Tensor, y: np.ndarray, cfg: AttackConfig = AttackConfig(),
        rng: Optional[np.random.Generator] = None) -> AdvExample:
    """Projected signed-gradient ascent on the configured objective.

    With best-iterate tracking the returned point is, per sample, the iterate
    among steps 1..k with the largest objective (earliest on ties); the
    starting point is never returned.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cur = x.copy()
    if cfg.random_start:
        cur = np.clip(x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape).astype(x.dtype), 0.0, 1.0)

    best = cur.copy()
    best_loss = np.full(len(x), -np.inf)
    best_logits: Optional[np.ndarray] = None
    clean_pred: Optional[np.ndarray] = None
    trajectory = []

    def keep_best(point: Tensor, logits: Tensor, loss: np.ndarray) -> None:
        nonlocal best_logits
        better = loss > best_loss
        if best_logits is None:
            best_logits = logits.copy()
        best[better] = point[better]
        best_loss[better] = loss[better]
        best_logits[better] = logits[better]

    for step in range(cfg.steps):
        logits, grad = model.input_gradient(cur, y, cfg.loss_kind, cfg.cw_kappa)
        loss = attack_objective(logits, y, cfg.loss_kind, cfg.cw_kappa)
        trajectory.append(loss)
        if step == 0 and not cfg.random_start:
            clean_pred = np.argmax(logits, axis=1)
        if step > 0 and cfg.track_best:
            keep_best(cur, logits, loss)
        candidate = np.clip(cur + cfg.step_size * np.sign(grad), 0.0, 1.0)
        cur = project_linf(candidate, x, cfg.eps)

    final_logits = model.logits(cur, y)
    final_loss = attack_objective(final_logits, y, cfg.loss_kind, cfg.cw_kappa)
    trajectory.append(final_loss)
    if cfg.track_best:
        keep_best(cur, final_logits, final_loss)
        x_adv, adv_logits = best, best_logits
    else:
        x_adv, adv_logits = cur, final_logits

    return AdvExample(x=x, x_adv=x_adv, y=y, loss_trajectory=np.stack(trajectory),
                      adv_pred=np.argmax(adv_logits, axis=1), gradient_steps=cfg.steps,
                      _clean_pred=clean_pred, _clean_logits=lambda: model.logits(x, y))


def cw(model: TapeModel, x: Tensor, y: np.ndarray, cfg: AttackConfig = AttackConfig(),
       rng: Optional[np.random.Generator] = None) -> AdvExample:
    return pgd(model, x, y, cfg.with_(loss_kind="cw_margin"), rng)


def run_attack(model: TapeModel, x: Tensor, y: np.ndarray, attack: str, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> AdvExample:
    if attack == "fgsm":
        return fgsm(model, x, y, cfg.eps)
    if attack == "pgd":
        return pgd(model, x, y, cfg, rng)
    if attack == "cw":
        return cw(model, x, y, cfg, rng)
    raise ContractError(f"unknown attack {attack!r}, expected one of {ATTACKS}")


@dataclass
class AttackSummary:
    attack: str
    clean_acc: float
    adv_acc: float
    mean_linf: float
    n: int
    records: List[Dict[str, Any]] = field(default_factory=list)

    def as_row(self) -> Dict[str, Any]:
        return {"attack": self.attack, "n": self.n, "clean_acc": self.clean_acc,
                "adv_acc": self.adv_acc, "mean_linf": self.mean_linf}

    def write_records(self, path: Union[str, Path]) -> Path:
        """Per-sample CSV: sample_id, label, clean_pred, adv_pred, linf, success."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["sample_id", "label", "clean_pred", "adv_pred",
                                                    "linf", "success"], lineterminator="\n")
            writer.writeheader()
            for row in self.records:
                writer.writerow({**row, "linf": f"{row['linf']:.6g}", "success": int(row["success"])})
        return path


def _evaluate(craft: TapeModel, judge: TapeModel, dataset: Any, cfg: AttackConfig, attack: str,
              batch_size: int, rng: Optional[np.random.Generator], label: str) -> AttackSummary:
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ContractError("cannot evaluate an attack on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    clean_hits = adv_hits = 0
    linf_total = 0.0
    records: List[Dict[str, Any]] = []
    for start in range(0, len(labels), batch_size):
        x, y = images[start:start + batch_size], labels[start:start + batch_size]
        adv = run_attack(craft, x, y, attack, cfg, rng)
        clean_pred = adv.clean_pred if craft is judge else judge.predict(x, y)
        adv_pred = adv.adv_pred if craft is judge else judge.predict(adv.x_adv, y)
        linf = adv.linf
        clean_hits += int((clean_pred == y).sum())
        adv_hits += int((adv_pred == y).sum())
        linf_total += float(linf.sum())
        for i in range(len(y)):
            records.append({"sample_id": start + i, "label": int(y[i]), "clean_pred": int(clean_pred[i]),
                            "adv_pred": int(adv_pred[i]), "linf": float(linf[i]),
                            "success": bool(adv_pred[i] != y[i])})
    n = len(labels)
    summary = AttackSummary(label, clean_hits / n, adv_hits / n, linf_total / n, n, records)
    log.info("attack evaluated", attack=label, n=n, clean_acc=summary.clean_acc, adv_acc=summary.adv_acc)
    return summary


def attack_label(attack: str, cfg: AttackConfig) -> str:
    return "FGSM" if attack == "fgsm" else f"{attack.upper()}{cfg.steps}"


def attack_success_rate(model: TapeModel, dataset: Any, cfg: AttackConfig = AttackConfig(),
                        attack: str = "pgd", batch_size: int = ATTACK_BATCH,
                        rng: Optional[np.random.Generator] = None) -> AttackSummary:
    """Clean and adversarial accuracy on the same samples, plus mean L-inf of the perturbations."""
    return _evaluate(model, model, dataset, cfg, attack, batch_size, rng, attack_label(attack, cfg))


def backbone_only(model: TapeModel) -> TapeModel:
    """Same parameters with the self-gradient block switched off."""
    twin = model.clone()
    if isinstance(twin, SGNetwork):
        twin.block_enabled = False
    return twin


def block_ablation(model: SGNetwork, dataset: Any, cfg: AttackConfig = AttackConfig(),
                   attack: str = "pgd", batch_size: int = ATTACK_BATCH) -> List[Dict[str, Any]]:
    """Clean and adversarial accuracy with the block on, then off, for one trained model.

    Each arm is attacked white-box, with the same random stream.
    """
    if not isinstance(model, SGNetwork):
        raise ContractError(f"block ablation needs a self-gradient network, got {model.kind!r}")
    rows = []
    for enabled in (True, False):
        twin = model.clone()
        twin.block_enabled = enabled
        summary = attack_success_rate(twin, dataset, cfg, attack, batch_size, np.random.default_rng(cfg.seed))
        rows.append({"block": "on" if enabled else "off", "attack": summary.attack,
                     "clean_acc": summary.clean_acc, "adv_acc": summary.adv_acc})
    return rows


def transfer_attack(target: TapeModel, dataset: Any, cfg: AttackConfig = AttackConfig(),
                    source: Optional[TapeModel] = None, attack: str = "pgd",
                    batch_size: int = ATTACK_BATCH,
                    rng: Optional[np.random.Generator] = None) -> AttackSummary:
    """Craft on ``source`` (default: the target without its block), evaluate on ``target``."""
    source = source if source is not None else backbone_only(target)
    return _evaluate(source, target, dataset, cfg, attack, batch_size, rng,
                     "transfer-" + attack_label(attack, cfg))


def robustness_grid(model: TapeModel, dataset: Any, cfg: AttackConfig = AttackConfig(),
                    steps: Sequence[int] = (10, 20), batch_size: int = ATTACK_BATCH,
                    include_transfer: bool = False) -> List[Dict[str, Any]]:
    """Clean, FGSM, PGD-k and CW-k accuracies for every k in ``steps``."""
    summaries = [attack_success_rate(model, dataset, cfg, "fgsm", batch_size)]
    for k in steps:
        step_cfg = cfg.with_(steps=k)
        summaries.append(attack_success_rate(model, dataset, step_cfg, "pgd", batch_size))
        summaries.append(attack_success_rate(model, dataset, step_cfg, "cw", batch_size))
    if include_transfer:
        summaries.append(transfer_attack(model, dataset, cfg.with_(steps=max(steps)), batch_size=batch_size))
    rows = [{"attack": "clean", "accuracy": summaries[0].clean_acc, "mean_linf": 0.0}]
    rows.extend({"attack": s.attack, "accuracy": s.adv_acc, "mean_linf": s.mean_linf} for s in summaries)
    return rows
