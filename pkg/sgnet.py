"""
Command-line front door for the self-gradient lab.

    python sgnet.py theorem --func quadratic --eps 0.1 --x0 1 --steps 50
    python sgnet.py train --mode selfgrad --epochs 5 --out runs/sg
    python sgnet.py ablate --model runs/sg/model.ckpt --attack pgd --steps 10

Every run writes its reports plus manifest.json into --out. Exit codes: 0 on
success, 2 for usage and precondition errors, 1 for runtime failures.
"""

from __future__ import annotations

import os
import sys
from typing import Optional

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def configure_threads(argv: list) -> Optional[str]:
    """Pin BLAS/OpenMP workers; only effective before numpy is first imported.

    SGNET_THREADS wins whenever it is set; otherwise deterministic runs use one
    worker and --no-deterministic leaves the libraries to choose.
    """
    count = os.environ.get("SGNET_THREADS") or ("1" if "--no-deterministic" not in argv else None)
    if count:
        for var in THREAD_VARS:
            os.environ[var] = count
    return count


configure_threads(sys.argv[1:])

import argparse  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Dict, Sequence, Tuple  # noqa: E402

import numpy as np  # noqa: E402
import structlog  # noqa: E402

from attacks import attack_success_rate, block_ablation, robustness_grid  # noqa: E402
from checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from config import (  # noqa: E402
    RunConfig,
    attack_config,
    backbone_config,
    block_config,
    resolve_config,
    synthetic_config,
    train_config,
)
from data_io import LabeledImageSet, load_cifar10_dir, subset_and_downsample, synth_blobs  # noqa: E402
from errors import ContractError, DivergenceError, SGNetError  # noqa: E402
from network import SGNetwork, TapeModel  # noqa: E402
from reports import RunManifest, emit_report  # noqa: E402
from theorem_lab import AnalyticFunc, iterate_self_gradient, norm_diff_series  # noqa: E402
from training import oracle_gradient_experiment, train  # noqa: E402

log = structlog.get_logger()

DEFAULTS = RunConfig()
Outputs = Dict[str, Path]
Inputs = Dict[str, str]


def configure_logging(verbosity: int = 0) -> None:
    level = logging.DEBUG if verbosity > 0 else logging.WARNING if verbosity < 0 else logging.INFO
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


# --------------------------------------------------------------------------
# Data and models
# --------------------------------------------------------------------------

def load_data(rc: RunConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """(train, test) for the configured dataset, labels relabelled to 0..len(classes)-1."""
    if rc.dataset == "synth":
        full = synth_blobs(synthetic_config(rc))
        return full.split(rc.per_class * len(rc.classes))
    if rc.data_dir is None:
        raise ContractError("--data-dir is required for --dataset cifar10-subset")
    train_raw, test_raw = load_cifar10_dir(rc.data_dir)
    train_set = subset_and_downsample(train_raw, rc.classes, rc.per_class, rc.extent, rc.seed)
    test_set = subset_and_downsample(test_raw, rc.classes, rc.test_per_class, rc.extent, rc.seed + 1)
    return train_set, test_set


def data_inputs(rc: RunConfig) -> Inputs:
    return {"data_dir": rc.data_dir} if rc.dataset == "cifar10-subset" and rc.data_dir else {}


def load_model(rc: RunConfig, command: str) -> TapeModel:
    if rc.model is None:
        raise ContractError(f"{command} needs --model")
    model = load_checkpoint(rc.model)
    if isinstance(model, SGNetwork) and rc.block is not None:
        model.block_enabled = rc.block == "on"
    return model.eval()


def load_sgnet(rc: RunConfig, command: str) -> SGNetwork:
    model = load_model(rc, command)
    if not isinstance(model, SGNetwork):
        raise ContractError(f"{command} needs a self-gradient network, {rc.model} holds {model.kind!r}")
    return model


def make_func(rc: RunConfig) -> AnalyticFunc:
    if rc.func == "linear":
        return AnalyticFunc.linear(rc.slope)
    if rc.func == "scaled_quadratic":
        return AnalyticFunc.scaled_quadratic(rc.k)
    if rc.func == "polynomial":
        return AnalyticFunc.polynomial(rc.coeffs)
    return AnalyticFunc(rc.func)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_train(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    train_set, test_set = load_data(rc)
    model = SGNetwork(backbone_config(rc, train_set.shape, train_set.num_classes),
                      block_config(rc, train_set.shape[0]), block_enabled=rc.block_enabled(),
                      seed=rc.seed, dtype=np.float32)
    try:
        result = train(model, train_set, train_config(rc), val=test_set)
    except DivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.ckpt")
        raise
    log.info("training finished", mode=rc.mode, attack_steps=result.attack_steps, batches=result.batches)
    outputs = {
        "checkpoint": save_checkpoint(result.checkpoint, out / "model.ckpt"),
        "metrics": result.metrics.to_csv(out / "metrics.csv"),
    }
    return outputs, data_inputs(rc)


def cmd_attack(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    model = load_model(rc, "attack")
    _, test_set = load_data(rc)
    summary = attack_success_rate(model, test_set.head(rc.eval_samples), attack_config(rc), rc.attack)
    outputs = {
        "samples": summary.write_records(out / "attack_samples.csv"),
        "summary": emit_report([summary.as_row()], out / "attack_summary.csv"),
    }
    return outputs, {"model": rc.model, **data_inputs(rc)}


def cmd_ablate(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    model = load_sgnet(rc, "ablate")
    _, test_set = load_data(rc)
    rows = block_ablation(model, test_set.head(rc.eval_samples), attack_config(rc), rc.attack)
    log.info("block ablation", adv_drop=rows[0]["adv_acc"] - rows[1]["adv_acc"],
             clean_change=rows[0]["clean_acc"] - rows[1]["clean_acc"])
    return {"ablation": emit_report(rows, out / "ablation.csv")}, {"model": rc.model, **data_inputs(rc)}


def cmd_converge(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    model = load_sgnet(rc, "converge").astype(np.float64)
    _, test_set = load_data(rc)
    series = norm_diff_series(model, test_set.head(rc.eval_samples).images, n=rc.steps)
    if not series.rapid_decay():
        log.warning("norm differences did not decay rapidly", trace=[round(float(d), 6) for d in series.mean])
    return {"series": emit_report(series.rows(), out / "convergence.csv")}, {"model": rc.model, **data_inputs(rc)}


def cmd_theorem(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    trace = iterate_self_gradient(make_func(rc), rc.x0, rc.eps, n_max=rc.steps, tol=rc.tol,
                                  diverge_bound=rc.diverge_bound, force=rc.force_eps)
    log.info("iteration finished", func=trace.func, verdict=trace.verdict.kind, step=trace.verdict.step,
             final_f=trace.final_f, contraction=trace.contraction_ratio)
    json_path = out / "trace.json"
    json_path.write_text(trace.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return {"trace": trace.to_csv(out / "trace.csv"), "trace_json": json_path}, {}


def cmd_motivate(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    train_set, test_set = load_data(rc)
    cfg = train_config(rc.model_copy(update={"mode": "standard"}))
    report = oracle_gradient_experiment(train_set, test_set.head(rc.eval_samples), cfg,
                                        backbone_config(rc, train_set.shape, train_set.num_classes),
                                        eval_attack=attack_config(rc))
    log.info("oracle gradient gap", adv_gap=report.adv_gap, clean_gap=report.clean_gap)
    return {"motivation": emit_report(report.rows(), out / "motivation.csv")}, data_inputs(rc)


def cmd_eval(rc: RunConfig, out: Path) -> Tuple[Outputs, Inputs]:
    model = load_model(rc, "eval")
    _, test_set = load_data(rc)
    include_transfer = isinstance(model, SGNetwork) and model.block_enabled
    rows = robustness_grid(model, test_set.head(rc.eval_samples), attack_config(rc),
                           steps=rc.grid_steps, include_transfer=include_transfer)
    return {"robustness": emit_report(rows, out / "robustness.csv")}, {"model": rc.model, **data_inputs(rc)}


COMMANDS: Dict[str, Callable[[RunConfig, Path], Tuple[Outputs, Inputs]]] = {
    "train": cmd_train,
    "attack": cmd_attack,
    "ablate": cmd_ablate,
    "converge": cmd_converge,
    "theorem": cmd_theorem,
    "motivate": cmd_motivate,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

_BOOL = dict(action=argparse.BooleanOptionalAction)
FLAG_SPECS: Dict[str, Tuple[Dict[str, Any], str]] = {
    "seed": (dict(type=int), "seed for data, initialisation and attacks"),
    "out": (dict(), "output directory"),
    "deterministic": (_BOOL, "single-threaded numerics unless SGNET_THREADS sets the worker count"),
    "progress": (_BOOL, "show a progress bar per epoch"),
    "dataset": (dict(choices=("cifar10-subset", "synth")), "dataset"),
    "data_dir": (dict(), "directory holding the CIFAR-10 binary batches"),
    "classes": (dict(type=int, nargs="+"), "class indices to keep"),
    "per_class": (dict(type=int), "training samples per class"),
    "test_per_class": (dict(type=int), "test samples per class"),
    "extent": (dict(type=int), "image side length after downsampling"),
    "eval_samples": (dict(type=int), "test samples to evaluate"),
    "model": (dict(), "checkpoint to load"),
    "width": (dict(type=int), "backbone width multiplier"),
    "depth": (dict(type=int), "residual blocks in the backbone"),
    "stack_depth": (dict(type=int), "layers in the self-gradient block"),
    "eps_block": (dict(type=float), "scale of the block output"),
    "normalize_grad": (_BOOL, "L2-standardize the gradient fed to the block"),
    "block": (dict(choices=("on", "off")), "self-gradient block at inference (default: on for selfgrad)"),
    "attack": (dict(choices=("fgsm", "pgd", "cw")), "attack"),
    "steps": (dict(type=int), "steps"),
    "eps": (dict(type=float), "L-inf budget, or the self-gradient step for theorem"),
    "alpha": (dict(type=float), "attack step size"),
    "random_start": (_BOOL, "start PGD at a random point of the eps-ball"),
    "kappa": (dict(type=float), "CW confidence margin"),
    "grid_steps": (dict(type=int, nargs="+"), "attack step counts for the robustness grid"),
    "mode": (dict(choices=("standard", "madry", "selfgrad")), "training regime"),
    "epochs": (dict(type=int), "training epochs"),
    "batch_size": (dict(type=int), "batch size"),
    "lr": (dict(type=float), "base learning rate"),
    "weight_decay": (dict(type=float), "weight decay"),
    "pgd_steps": (dict(type=int), "PGD steps per batch for madry training"),
    "augment": (_BOOL, "random crop and flip while training"),
    "func": (dict(choices=("linear", "quadratic", "scaled_quadratic", "tanh_sum", "polynomial")),
             "analytic test function"),
    "x0": (dict(type=float, nargs="+"), "starting point"),
    "slope": (dict(type=float, nargs="+"), "slope of the linear function"),
    "k": (dict(type=float), "curvature of scaled_quadratic"),
    "coeffs": (dict(type=float, nargs="+"), "polynomial coefficients, lowest degree first"),
    "tol": (dict(type=float), "convergence tolerance"),
    "diverge_bound": (dict(type=float), "divergence bound on |f|"),
    "force_eps": (dict(action="store_true"), "allow eps outside [0, 1)"),
}

COMMON = ("seed", "out", "deterministic")
DATA = ("dataset", "data_dir", "classes", "per_class", "test_per_class", "extent", "eval_samples")
ARCH = ("width", "depth", "stack_depth", "eps_block", "normalize_grad", "block")
ATTACK = ("model", "block", "attack", "steps", "eps", "alpha", "random_start", "kappa")

SUBCOMMAND_FLAGS: Dict[str, Tuple[str, ...]] = {
    "train": COMMON + DATA + ARCH + ("mode", "epochs", "batch_size", "lr", "weight_decay", "pgd_steps",
                                     "eps", "alpha", "augment", "progress"),
    "attack": COMMON + DATA + ATTACK,
    "ablate": COMMON + DATA + ("model", "attack", "steps", "eps", "alpha", "random_start", "kappa"),
    "converge": COMMON + DATA + ("model", "steps"),
    "theorem": COMMON + ("func", "eps", "x0", "steps", "slope", "k", "coeffs", "tol", "diverge_bound",
                         "force_eps"),
    "motivate": COMMON + DATA + ("width", "depth", "epochs", "batch_size", "lr", "weight_decay",
                                 "steps", "eps", "alpha", "progress"),
    "eval": COMMON + DATA + ("model", "block", "eps", "alpha", "random_start", "kappa", "grid_steps"),
}

HELP = {
    "train": "train a self-gradient network (or its plain backbone)",
    "attack": "run one attack against a checkpoint",
    "ablate": "compare a checkpoint with its block on and off",
    "converge": "norm-difference series of repeated gradient injection",
    "theorem": "iterate the self-gradient map of an analytic function",
    "motivate": "train with and without the labelled input gradient as extra channels",
    "eval": "clean, FGSM, PGD and CW accuracy grid",
    "replay": "re-run a manifest and compare artifact hashes",
}


def _add_flag(parser: argparse.ArgumentParser, dest: str) -> None:
    kwargs, text = FLAG_SPECS[dest]
    default = getattr(DEFAULTS, dest)
    parser.add_argument("--" + dest.replace("_", "-"), dest=dest, default=None,
                        help=f"{text} (default: {default})", **kwargs)


def build_parser() -> argparse.ArgumentParser:
    verbosity = argparse.ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    verbosity.add_argument("-q", "--quiet", action="count", default=0, help="less log output")
    verbosity.add_argument("--config", type=Path, default=None,
                           help="JSON/TOML config file or run manifest; flags override it")

    parser = argparse.ArgumentParser(prog="sgnet", description="Self-gradient network lab.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, flags in SUBCOMMAND_FLAGS.items():
        p = sub.add_parser(name, parents=[verbosity], help=HELP[name], description=HELP[name])
        for dest in dict.fromkeys(flags):
            _add_flag(p, dest)
    replay = sub.add_parser("replay", parents=[verbosity], help=HELP["replay"], description=HELP["replay"])
    replay.add_argument("manifest", type=Path, help="manifest.json of an earlier run")
    replay.add_argument("--out", type=Path, required=True, help="output directory for the re-run")
    return parser


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------

def execute(command: str, rc: RunConfig) -> Path:
    """Run one subcommand, write its manifest and return the manifest path."""
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, inputs = COMMANDS[command](rc, out)
    manifest = RunManifest.for_outputs(command, rc.model_dump(mode="json"), rc.seed, inputs, outputs)
    path = manifest.write(out)
    log.info("run complete", command=command, out=str(out))
    for artifact in outputs.values():
        print(artifact)
    print(path)
    return path


def replay_manifest(path: Path, out: Path) -> Dict[str, bool]:
    """Re-run the manifest's subcommand into ``out``; per-artifact hash agreement."""
    original = RunManifest.read(path)
    if original.subcommand not in COMMANDS:
        raise ContractError(f"{path}: unknown subcommand {original.subcommand!r}")
    rc = resolve_config(path, {"out": str(out)})
    replayed = RunManifest.read(execute(original.subcommand, rc))
    return {name: replayed.artifact_hashes.get(name) == digest
            for name, digest in original.artifact_hashes.items()}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose - args.quiet)
    try:
        if args.command == "replay":
            matches = replay_manifest(args.manifest, args.out)
            differing = sorted(name for name, ok in matches.items() if not ok)
            if differing:
                log.error("replay differs", artifacts=differing)
                return 1
            return 0
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "quiet")}
        execute(args.command, resolve_config(args.config, flags))
    except ContractError as exc:
        print(f"sgnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SGNetError, OSError) as exc:
        print(f"sgnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
