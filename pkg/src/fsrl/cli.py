"""Command-line entry point: ``fsrl <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure (including a failed verification),
2 usage error, 3 invalid configuration, 4 missing checkpoint or prerequisite
artifact, 5 corrupt or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, override

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CHECKPOINT = 5

log = logging.getLogger("fsrl")


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# subcommand -> (help, stage, extra flags as (flag, dotted key, type, help))
Flag = tuple[str, str, type, str]
COMMANDS: dict[str, tuple[str, Callable, list[Flag]]] = {
    "gen-data": (
        "generate the pretraining corpus and preference triplets",
        pipeline.gen_data,
        [
            ("--n-train", "data.n_train", int, "training triplets"),
            ("--n-val", "data.n_val", int, "validation triplets"),
            ("--n-corpus", "data.n_corpus", int, "pretraining documents"),
        ],
    ),
    "train-lm": (
        "pretrain and freeze the base model",
        pipeline.train_lm_stage,
        [
            ("--steps", "lm.steps", int, "optimizer steps"),
            ("--lr", "lm.lr", float, "peak learning rate"),
            ("--hook-layer", "lm.hook_layer", int, "layer whose input is steered"),
        ],
    ),
    "train-sae": (
        "train the sparse autoencoder on hook activations",
        pipeline.train_sae_stage,
        [
            ("--alpha-sae", "sae.alpha_sae", float, "l1 coefficient"),
            ("--steps", "sae.steps", int, "optimizer steps"),
        ],
    ),
    "train-adapter": (
        "train the steering adapter against SimPO",
        pipeline.train_adapter_stage,
        [
            ("--alpha-steer", "simpo.alpha_steer", float, "steering sparsity coefficient"),
            ("--variant", "simpo.variant", str, "soft_threshold | relu | jump_relu"),
            ("--epochs", "simpo.epochs", int, "passes over the training triplets"),
            ("--lr", "simpo.lr", float, "adapter learning rate"),
        ],
    ),
    "train-baseline": (
        "fully fine-tune a copy of the base model with SimPO",
        pipeline.train_baseline_stage,
        [("--epochs", "simpo.epochs", int, "passes over the training triplets")],
    ),
    "eval-loss": ("validation SimPO loss: unsteered, steered, fine-tuned", pipeline.eval_loss_stage, []),
    "ablate": (
        "zero steering on feature categories and measure the loss",
        pipeline.ablate_stage,
        [("--mask-ratio", "analysis.mask_ratio", float, "category membership ratio")],
    ),
    "topk-baseline": ("static top-k percent steering curve", pipeline.topk_stage, []),
    "analyze-usage": (
        "feature usage frequencies and log-linear fit",
        pipeline.usage_stage,
        [("--mask-ratio", "analysis.mask_ratio", float, "category membership ratio")],
    ),
    "composition": (
        "category composition of active features, SAE vs steering",
        pipeline.composition_stage,
        [("--n-boot", "analysis.n_boot", int, "bootstrap resamples")],
    ),
    "sweep": ("train one adapter per layer / alpha / variant setting", pipeline.sweep_stage, []),
    "verify-theory": (
        "random-instance checks of the affine form and rank bounds",
        pipeline.verify_theory_stage,
        [("--trials", "theory.n_trials", int, "random instances")],
    ),
    "grad-check": (
        "finite-difference check of every trainable path",
        pipeline.grad_check_stage,
        [("--instances", "gradcheck.n_instances", int, "kink-safe instances")],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", type=Path, help="run directory (overrides config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="fsrl", description="Sparse feature steering trained with SimPO on a toy model.")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="subcommand")
    for name, (help_text, _, flags) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        for flag, key, tp, h in flags:
            sp.add_argument(flag, dest="opt:" + key, type=tp, help=h)
        if name == "sweep":
            sp.add_argument("--kind", choices=("alpha", "layer", "variant", "all"), default="alpha")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {"seed": args.seed, "out": str(args.out) if args.out else None}
    overrides.update({k[4:]: v for k, v in vars(args).items() if k.startswith("opt:")})
    overrides.update(_parse_set(args.set))
    return override(cfg, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"fsrl: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, stage, _ = COMMANDS[args.cmd]
    log.info("%s -> %s", args.cmd, out)
    try:
        summary = stage(cfg, out, args.kind) if args.cmd == "sweep" else stage(cfg, out)
    except pipeline.MissingArtifactError as e:
        print(f"fsrl: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as e:
        print(f"fsrl: bad checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as e:
        print(f"fsrl: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report, do not traceback, at the CLI boundary
        log.debug("failure", exc_info=True)
        print(f"fsrl: {args.cmd} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(summary, indent=2, sort_keys=True))
    if summary.get("passed") is False:
        print(f"fsrl: {args.cmd} verification failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
