"""
rccformer.cli - Command-line verbs

    synth      build a synthetic dataset
    train      train one configuration
    eval       evaluate a checkpoint on a dataset split
    infer      density grid, heatmap and count for one image
    gradcheck  gradient certification (ops | blocks | model)
    ablate     train and tabulate one ablation matrix

Common flags: --config <yaml>, --seed <u64>, --out <dir>, --force.
Library errors become a ❌ line on stderr and exit code 1.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .certify import run_suite
from .core.errors import ConfigError, RCCError
from .core.model_config import RunConfig, apply_overrides, load_run_config
from .core.rng import MAX_SEED
from .core.tensor import Tensor
from .data.loader import CrowdDataset, build_dataset, read_image
from .enums import AblationMatrix, GradcheckScope, Split
from .evaluator import Evaluator, load_model
from .metrics import format_table, write_jsonl
from .nets.backbone import required_padding
from .nets.model import forward
from .orchestrator import Trainer, run_ablation
from .render import write_grid, write_heatmap

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(
            f"seed must be an unsigned 64-bit integer, got {text}"
        )
    return value


def _parse_sets(pairs: List[str]) -> Dict[str, Any]:
    overrides = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{pair}'")
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Preset ← config file ← --set ← dedicated flags."""
    config = load_run_config(args.config)
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if args.out and args.command != "synth":
        overrides["out"] = args.out
    return apply_overrides(config, overrides) if overrides else config


# =============================================================================
# Verbs
# =============================================================================


def cmd_synth(args: argparse.Namespace) -> int:
    config = _run_config(args)
    root = Path(args.out or config.dataset)
    _status(f"🔄 Synthesising {config.synth.n_train} train + "
            f"{config.synth.n_val} val scenes into {root}")
    build_dataset(root, config.synth, config.seed, force=args.force)
    _status(f"✅ Dataset ready at {root}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    out = Path(config.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    result = Trainer(config).run()
    _status(f"✅ Best validation MAE {result.best_mae:.3f}; "
            f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    checkpoint = Path(args.checkpoint or config.checkpoint_path)
    _status(f"🔄 Evaluating {checkpoint} on {config.dataset} [{args.split}]")
    dataset = CrowdDataset(config.dataset, args.split)
    summary = Evaluator(load_model(checkpoint)).evaluate(dataset)
    print(format_table(summary.report().to_frame()))
    if args.out:
        write_jsonl(summary.records, Path(args.out) / f"eval_{args.split}.jsonl")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint)
    image = read_image(args.image)
    _, h, w = image.shape
    pad_h, pad_w = required_padding(h, w)
    if pad_h or pad_w:
        logger.warning(f"Padding {args.image} by {pad_h} rows and {pad_w} columns")
        _status(f"⚠️ Padded {w}×{h} input by {pad_h} bottom / {pad_w} right "
                "to a multiple of 32")
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
    grid = forward(Tensor(image[None]), model).grid.data[0, 0]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    write_grid(out / f"{stem}.rccd", grid)
    write_heatmap(out / f"{stem}_heatmap.png", grid)
    print(repr(float(grid.sum())))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scope = GradcheckScope(args.scope)
    _status(f"🔄 Gradient certification: {scope.value}")
    results = run_suite(scope, args.seed or 0)
    rows = [{"case": r.name, "error": r.error, "tol": r.tol, "passed": r.passed}
            for r in results]
    print(format_table(rows, floatfmt="{:.2e}"))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _status(f"❌ {len(failed)} case(s) failed: {', '.join(failed)}")
        return EXIT_FAILURE
    _status(f"✅ All {len(results)} case(s) passed")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    try:
        matrix = AblationMatrix(args.matrix)
    except ValueError:
        raise ConfigError(f"unknown ablation matrix '{args.matrix}'") from None
    table = run_ablation(config, matrix)
    print(format_table(table))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rccformer",
                                     description="Crowd counting by density estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=Path, help="flat-key YAML config")
        p.add_argument("--seed", type=_seed, help="unsigned 64-bit run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    common(sub.add_parser("synth", help="build a synthetic dataset"))
    train = common(sub.add_parser("train", help="train one configuration"))
    train.add_argument("--dataset")
    evaluate = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--dataset")
    evaluate.add_argument("--split", choices=[s.value for s in Split],
                          default=Split.VAL.value)
    infer = common(sub.add_parser("infer", help="density map of one image"))
    infer.add_argument("checkpoint")
    infer.add_argument("image")
    gradcheck = common(sub.add_parser("gradcheck", help="gradient certification"))
    gradcheck.add_argument("--scope", choices=[s.value for s in GradcheckScope],
                           default=GradcheckScope.OPS.value)
    ablate = common(sub.add_parser("ablate", help="run an ablation matrix"))
    ablate.add_argument("--matrix", required=True)
    ablate.add_argument("--dataset")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and run one verb

    Returns:
        Process exit code
    """
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except RCCError as e:
        logger.error(f"{args.command} failed: {e}")
        _status(f"❌ {e}")
        return EXIT_FAILURE
