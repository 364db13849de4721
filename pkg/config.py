"""
Run configuration for the command line.

Values are resolved in three layers: RunConfig defaults, then a JSON or TOML
config file (a run manifest also works; its ``config`` section is used), then
the flags given on the command line.
"""

from __future__ import annotations

import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: tomli is the tomllib backport
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from attacks import AttackConfig
from data_io import SyntheticConfig
from errors import ContractError
from network import BackboneConfig, SelfGradBlockConfig
from training import OptimizerConfig, TrainConfig

# CLI mode names -> training regimes
MODE_NAMES = {"standard": "standard", "madry": "madry_pgd", "selfgrad": "selfgrad_onestep"}


class RunConfig(BaseModel):
    """Every knob a subcommand can read, with its default."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    out: str = "runs/latest"
    deterministic: bool = True
    progress: bool = False

    # data
    dataset: Literal["synth", "cifar10-subset"] = "synth"
    data_dir: Optional[str] = None
    classes: List[int] = [0, 1]
    per_class: int = Field(500, ge=1)
    test_per_class: int = Field(100, ge=1)
    extent: int = Field(16, ge=4)
    synth_noise: float = Field(0.05, ge=0)
    eval_samples: int = Field(256, ge=1)

    # model
    model: Optional[str] = None
    width: int = Field(1, ge=1)
    depth: int = Field(2, ge=1)
    stack_depth: int = Field(5, ge=1)
    eps_block: float = Field(8 / 255, ge=0)
    normalize_grad: bool = True
    block: Optional[Literal["on", "off"]] = None

    # attacks
    attack: Literal["fgsm", "pgd", "cw"] = "pgd"
    steps: int = Field(10, ge=1)
    eps: float = 8 / 255
    alpha: float = Field(2 / 255, gt=0)
    random_start: bool = True
    kappa: float = Field(0.0, ge=0)
    grid_steps: List[int] = [10, 20]

    # training
    mode: Literal["standard", "madry", "selfgrad"] = "standard"
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.1, gt=0)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: List[int] = [50, 100, 150]
    pgd_steps: int = Field(10, ge=1)
    augment: bool = False

    # theorem lab
    func: Literal["linear", "quadratic", "scaled_quadratic", "tanh_sum", "polynomial"] = "quadratic"
    x0: List[float] = [1.0]
    slope: List[float] = [1.0]
    k: float = 1.0
    coeffs: List[float] = [0.0, 0.0, 0.5]
    tol: float = Field(1e-6, gt=0)
    diverge_bound: float = Field(1e6, gt=0)
    force_eps: bool = False

    def block_enabled(self) -> bool:
        if self.block is None:
            return self.mode == "selfgrad"
        return self.block == "on"


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key {where!r}")
        else:
            parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Key/value settings from a .json or .toml file, or a run manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: cannot parse config file: {exc}") from exc
    if not isinstance(data, dict):
        raise ContractError(f"{path}: config file must hold a table of settings")
    if "subcommand" in data and isinstance(data.get("config"), dict):
        data = data["config"]
    return data


def resolve_config(path: Optional[Union[str, Path]] = None,
                   flags: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults < file < flags; flags left as None do not override."""
    merged: Dict[str, Any] = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ContractError(f"invalid configuration: {_describe(exc)}") from exc


# --------------------------------------------------------------------------
# RunConfig -> domain configs
# --------------------------------------------------------------------------

def attack_config(rc: RunConfig) -> AttackConfig:
    return AttackConfig(eps=rc.eps, steps=rc.steps, step_size=rc.alpha, random_start=rc.random_start,
                        cw_kappa=rc.kappa, seed=rc.seed)


def optimizer_config(rc: RunConfig) -> OptimizerConfig:
    return OptimizerConfig(lr=rc.lr, momentum=rc.momentum, weight_decay=rc.weight_decay,
                           decay_epochs=tuple(rc.decay_epochs))


def train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(mode=MODE_NAMES[rc.mode], epochs=rc.epochs, batch_size=rc.batch_size, seed=rc.seed,
                       attack=attack_config(rc), pgd_steps=rc.pgd_steps, optimizer=optimizer_config(rc),
                       augment=rc.augment, probe_samples=min(rc.eval_samples, 256), progress=rc.progress)


def backbone_config(rc: RunConfig, shape: tuple, num_classes: int) -> BackboneConfig:
    channels, height, width = shape
    return BackboneConfig(in_channels=channels, height=height, width=width, num_classes=num_classes,
                          width_multiplier=rc.width, depth=rc.depth)


def block_config(rc: RunConfig, channels: int) -> SelfGradBlockConfig:
    return SelfGradBlockConfig(stack_depth=rc.stack_depth, eps_block=rc.eps_block, channels=channels,
                               normalize_grad=rc.normalize_grad)


def synthetic_config(rc: RunConfig) -> SyntheticConfig:
    return SyntheticConfig(num_classes=len(rc.classes), per_class=rc.per_class + rc.test_per_class,
                           extent=rc.extent, noise=rc.synth_noise, seed=rc.seed)
