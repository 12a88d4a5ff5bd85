"""Command line entry point.

    imago gen-data --seed S --count N --out DIR
    imago train    --config FILE --out CKPT
    imago imagine  --checkpoint CKPT --scene-index I --policy P --timesteps T --samples N --seed S --out-pgm FILE
    imago eval     --checkpoint CKPT --policy uncertainty|random|both --samples N --seed S --out-csv FILE [--probe PROBE]
    imago probe    --checkpoint CKPT --out PROBE

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..agent import POLICIES, episode_rollout
from ..datasets import generate_glyphs, write_idx
from .config import TrainConfig, load_config
from .evaluation import evaluate
from .serialization import (
    export_pgm_grid,
    load_checkpoint,
    observation_composite,
    save_checkpoint,
    write_metrics_csv,
)
from .training import (
    agent_from_checkpoint,
    load_split,
    probe_checkpoint,
    probe_from_checkpoint,
    train,
    train_probe,
)

log = logging.getLogger("imago")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imago", description="Imaginative visual agent: train, imagine, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write glyph scenes as IDX files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--canvas", type=int, default=16)

    p = sub.add_parser("train", help="train an agent")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("imagine", help="roll out one test scene and export hypotheses as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-index", type=int, default=0)
    p.add_argument("--policy", choices=POLICIES, default="uncertainty")
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-pgm", required=True)

    p = sub.add_parser("eval", help="per-timestep metrics on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", choices=(*POLICIES, "both"), default="both")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--probe", default=None, help="probe checkpoint for entropy/accuracy columns")
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("probe", help="train the latent probe classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _gen_data(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = generate_glyphs(args.seed, args.count, (args.canvas, args.canvas))
    write_idx(out / "images-idx3-ubyte", (images * 255).astype(np.uint8))
    write_idx(out / "labels-idx1-ubyte", labels.astype(np.uint8))


def _train(args) -> None:
    config = load_config(args.config)
    result = train(config, progress=lambda e, r: log.info("epoch %d loss %.6f", e, r.loss_log[-1]))
    save_checkpoint(args.out, result.checkpoint())
    Path(f"{args.out}.loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(result.loss_log))
    )


def _imagine(args) -> None:
    agent, config = agent_from_checkpoint(load_checkpoint(args.checkpoint))
    scenes, _ = load_split(config, "test")
    if not 0 <= args.scene_index < len(scenes):
        raise IndexError(f"scene index {args.scene_index} outside test split of {len(scenes)}")
    scene = scenes[args.scene_index]
    timesteps = args.timesteps or config.timesteps
    trajectory = episode_rollout(agent, scene, timesteps, args.policy, args.samples, args.seed)
    rows = [(observation_composite(scene, state.mask), hyp.samples) for state, hyp in trajectory]
    export_pgm_grid(rows, args.out_pgm)


def _eval(args) -> None:
    agent, config = agent_from_checkpoint(load_checkpoint(args.checkpoint))
    scenes, labels = load_split(config, "test")
    probe = probe_from_checkpoint(load_checkpoint(args.probe)) if args.probe else None
    policies = POLICIES if args.policy == "both" else (args.policy,)
    rows = evaluate(
        agent,
        scenes,
        labels,
        probe,
        policies,
        config.timesteps,
        args.samples or config.n_eval,
        args.seed,
        args.repeats or config.repeats,
    )
    write_metrics_csv(rows, args.out_csv)


def _probe(args) -> None:
    agent, config = agent_from_checkpoint(load_checkpoint(args.checkpoint))
    scenes, labels = load_split(config, "train")
    probe = train_probe(agent, scenes, labels, config.timesteps, args.seed, config.probe_epochs, config.probe_hidden)
    save_checkpoint(args.out, probe_checkpoint(probe))


COMMANDS = {"gen-data": _gen_data, "train": _train, "imagine": _imagine, "eval": _eval, "probe": _probe}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # reported, not raised: the exit code is the contract
        print(f"imago {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
