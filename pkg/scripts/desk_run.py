"""Full desk-scale protocol: train, fit the probe, evaluate both policies, export a hypothesis grid.

    python3 scripts/desk_run.py --out-dir runs/glyphs
    python3 scripts/desk_run.py --config my.cfg --out-dir runs/custom --repeats 2

Writes agent.ckpt, probe.ckpt, metrics.csv, loss.csv and hypotheses.pgm, and
prints the per-timestep table.
"""

import argparse
import logging
import time
from pathlib import Path

from imago.agent import episode_rollout
from imago.harness.config import TrainConfig, format_config, load_config
from imago.harness.evaluation import evaluate
from imago.harness.serialization import export_pgm_grid, observation_composite, save_checkpoint, write_metrics_csv
from imago.harness.training import load_split, probe_checkpoint, train, train_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="key=value config file (defaults to the glyph protocol)")
    ap.add_argument("--out-dir", default="runs/glyphs")
    ap.add_argument("--repeats", type=int, help="override evaluation repeats")
    ap.add_argument("--scene-index", type=int, default=0, help="test scene for the PGM grid")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(config))

    train_scenes, train_labels = load_split(config, "train")
    test_scenes, test_labels = load_split(config, "test")

    start = time.perf_counter()
    result = train(config, train_scenes)
    print(f"trained {config.epochs} epochs in {time.perf_counter() - start:.0f}s, final loss {result.loss_log[-1]:.2f}")
    save_checkpoint(out / "agent.ckpt", result.checkpoint())
    (out / "loss.csv").write_text("epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(result.loss_log)))

    probe = train_probe(result.agent, train_scenes, train_labels, config.timesteps, 0, config.probe_epochs, config.probe_hidden)
    save_checkpoint(out / "probe.ckpt", probe_checkpoint(probe))

    repeats = args.repeats or config.repeats
    rows = evaluate(result.agent, test_scenes, test_labels, probe, timesteps=config.timesteps, n=config.n_eval, repeats=repeats)
    write_metrics_csv(rows, out / "metrics.csv")
    print(f"{'policy':<12}{'t':>3}{'bce':>9}{'max_var':>9}{'entropy':>9}{'acc':>7}")
    for r in rows:
        print(f"{r.policy:<12}{r.t:>3}{r.bce:>9.4f}{r.max_var:>9.4f}{r.cat_entropy:>9.3f}{r.probe_acc:>7.3f}")

    scene = test_scenes[args.scene_index]
    trajectory = episode_rollout(result.agent, scene, config.timesteps, "uncertainty", 8, seed=0)
    export_pgm_grid([(observation_composite(scene, s.mask), h.samples) for s, h in trajectory], out / "hypotheses.pgm")
    print(f"artifacts in {out}/")


if __name__ == "__main__":
    main()
