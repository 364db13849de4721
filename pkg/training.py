"""
Training loops: standard, Madry-style PGD adversarial training and one-step
self-gradient adversarial training, plus the oracle-gradient experiment.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from tqdm import tqdm

from attacks import AttackConfig, attack_success_rate, pgd
from checkpoint import Checkpoint
from data_io import LabeledImageSet, augment
from errors import ContractError, DivergenceError, NumericError
from network import BackboneConfig, OracleGradientNetwork, SGNetwork, TapeModel
from reports import TIMING_COLUMNS, emit_report

log = structlog.get_logger()

MODES = ("standard", "madry_pgd", "selfgrad_onestep")


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD with momentum; the rate is multiplied by decay_factor at each decay epoch."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: Tuple[int, ...] = (50, 100, 150)
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.decay_factor < 1:
            raise ContractError(f"decay factor must lie in (0, 1), got {self.decay_factor}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {self.weight_decay}")


def lr_at(epoch: int, cfg: OptimizerConfig) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr * cfg.decay_factor ** sum(1 for e in cfg.decay_epochs if e <= epoch)


class SGD:
    """v <- momentum * v + (g + wd * p);  p <- p - lr * v."""

    def __init__(self, params: Dict[str, np.ndarray], cfg: OptimizerConfig):
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            p = params[name]
            g = grad + self.cfg.weight_decay * p if self.cfg.weight_decay else grad
            v = self.cfg.momentum * self.velocity[name] + g
            self.velocity[name] = v.astype(p.dtype)
            params[name] = (p - lr * v).astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "standard"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    attack: AttackConfig = AttackConfig()
    pgd_steps: int = 10
    optimizer: OptimizerConfig = OptimizerConfig()
    oracle_gradient_input: bool = False
    augment: bool = False
    probe_samples: int = 256
    probe_steps: int = 5
    progress: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch size must be positive")
        if self.mode == "madry_pgd" and self.pgd_steps < 1:
            raise ContractError(f"madry_pgd needs at least one step, got {self.pgd_steps}")
        if self.mode == "selfgrad_onestep" and self.attack.eps <= 0:
            raise ContractError("selfgrad_onestep steps by eps, which must be positive")
        if self.probe_steps < 1 or self.probe_samples < 0:
            raise ContractError("probe attack needs at least one step")

    def train_attack(self) -> Optional[AttackConfig]:
        """Attack applied to every batch, or None for standard training."""
        if self.mode == "madry_pgd":
            return self.attack.with_(steps=self.pgd_steps)
        if self.mode == "selfgrad_onestep":
            return self.attack.with_(steps=1, step_size=self.attack.eps, random_start=True)
        return None


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_clean_acc: float
    val_adv_acc: float
    seconds: float


@dataclass
class MetricsLog:
    rows: List[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError(f"epoch {row.epoch} does not follow {self.rows[-1].epoch}")
        self.rows.append(row)

    def as_dicts(self, include_timing: bool = True) -> List[Dict[str, Any]]:
        out = [asdict(r) for r in self.rows]
        if not include_timing:
            for d in out:
                for col in TIMING_COLUMNS:
                    d.pop(col)
        return out

    def to_csv(self, path: Union[str, Path]) -> Path:
        return emit_report(self.as_dicts(), path)


@dataclass
class TrainResult:
    model: TapeModel
    checkpoint: Checkpoint
    metrics: MetricsLog
    attack_steps: int
    batches: int


def _check_model(model: TapeModel, cfg: TrainConfig) -> None:
    if cfg.mode == "selfgrad_onestep" and not (isinstance(model, SGNetwork) and model.block_enabled):
        raise ContractError("selfgrad_onestep trains a self-gradient network with its block enabled")
    if cfg.oracle_gradient_input != isinstance(model, OracleGradientNetwork):
        raise ContractError("oracle_gradient_input must be set exactly when training an oracle-gradient model")


def train(model: TapeModel, dataset: LabeledImageSet, cfg: TrainConfig,
          val: Optional[LabeledImageSet] = None) -> TrainResult:
    """Train ``model`` in place and return its final checkpoint and metrics.

    Every batch of an adversarial regime is replaced by its attacked version,
    crafted with frozen batch-norm statistics. A non-finite value anywhere in
    a training step raises DivergenceError carrying the checkpoint of the
    last completed epoch.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    _check_model(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.params, cfg.optimizer)
    attack_cfg = cfg.train_attack()
    probe = val.head(cfg.probe_samples) if val is not None and cfg.probe_samples else None
    probe_cfg = cfg.attack.with_(steps=cfg.probe_steps)
    metrics = MetricsLog()
    last_good = Checkpoint.from_model(model, epoch=0, seed=cfg.seed, mode=cfg.mode)
    attack_steps = batches = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.optimizer)
        started = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        stream = dataset.batches(cfg.batch_size, rng)
        if cfg.progress:
            stream = tqdm(stream, total=math.ceil(len(dataset) / cfg.batch_size),
                          desc=f"epoch {epoch + 1}/{cfg.epochs}", leave=False)
        try:
            for xb, yb in stream:
                if cfg.augment:
                    xb = augment(xb, rng)
                if attack_cfg is not None:
                    model.eval()
                    adv = pgd(model, xb, yb, attack_cfg, rng)
                    xb = adv.x_adv
                    attack_steps += adv.gradient_steps
                model.train()
                loss, logits, grads = model.loss_and_grads(xb, yb)
                if not math.isfinite(loss):
                    raise NumericError(f"training loss is {loss}")
                opt.step(model.params, grads, lr)
                loss_sum += loss * len(yb)
                correct += int((np.argmax(logits, axis=1) == yb).sum())
                seen += len(yb)
                batches += 1
        except NumericError as exc:
            model.eval()
            log.error("training diverged", epoch=epoch + 1, error=str(exc))
            raise DivergenceError(f"diverged in epoch {epoch + 1}: {exc}", last_good, epoch + 1) from exc
        model.eval()

        val_clean = val_adv = float("nan")
        if probe is not None:
            summary = attack_success_rate(model, probe, probe_cfg, "pgd",
                                          rng=np.random.default_rng(cfg.seed + epoch + 1))
            val_clean, val_adv = summary.clean_acc, summary.adv_acc
        row = MetricsRow(epoch + 1, loss_sum / seen, correct / seen, val_clean, val_adv,
                         time.perf_counter() - started)
        metrics.append(row)
        log.info("epoch finished", epoch=row.epoch, lr=lr, loss=round(row.train_loss, 4),
                 acc=round(row.train_acc, 4), val_clean=val_clean, val_adv=val_adv)
        last_good = Checkpoint.from_model(model, epoch=epoch + 1, seed=cfg.seed, mode=cfg.mode)

    return TrainResult(model, last_good, metrics, attack_steps, batches)


@dataclass
class OracleReport:
    with_grad: Dict[str, float]
    without_grad: Dict[str, float]

    @property
    def adv_gap(self) -> float:
        return self.with_grad["adv_acc"] - self.without_grad["adv_acc"]

    @property
    def clean_gap(self) -> float:
        return self.with_grad["clean_acc"] - self.without_grad["clean_acc"]

    def rows(self) -> List[Dict[str, Any]]:
        return [{"arm": "with_grad", **self.with_grad}, {"arm": "without_grad", **self.without_grad}]


def oracle_gradient_experiment(train_set: LabeledImageSet, test_set: LabeledImageSet, cfg: TrainConfig,
                               backbone_cfg: BackboneConfig, eval_attack: Optional[AttackConfig] = None,
                               dtype: Any = np.float32, zero_oracle: bool = False) -> OracleReport:
    """Train a plain backbone and an oracle-gradient backbone under ``cfg``; compare clean and PGD accuracy.

    The oracle arm sees the labelled cross-entropy input gradient as extra
    channels, at training and at test time.
    """
    eval_attack = eval_attack or cfg.attack.with_(steps=10)
    arms = {}
    for arm, model, arm_cfg in (
        ("with_grad", OracleGradientNetwork(backbone_cfg, seed=cfg.seed, dtype=dtype, zero_oracle=zero_oracle),
         replace(cfg, oracle_gradient_input=True)),
        ("without_grad", SGNetwork(backbone_cfg, block_enabled=False, seed=cfg.seed, dtype=dtype),
         replace(cfg, oracle_gradient_input=False)),
    ):
        train(model, train_set, arm_cfg)
        summary = attack_success_rate(model, test_set, eval_attack, "pgd")
        arms[arm] = {"clean_acc": summary.clean_acc, "adv_acc": summary.adv_acc}
        log.info("oracle arm evaluated", arm=arm, **arms[arm])
    return OracleReport(arms["with_grad"], arms["without_grad"])
