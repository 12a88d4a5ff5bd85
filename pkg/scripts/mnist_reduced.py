"""Reduced-scale MNIST protocol (14x14 after 2x2 pooling, 4x4 glimpses, 7 steps).

    python3 scripts/mnist_reduced.py --data-path ~/data/mnist --out-dir runs/mnist

``--data-path`` must hold the four standard IDX files (optionally gzipped):
train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
t10k-labels-idx1-ubyte.  Everything else defers to desk_run.py.
"""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

from imago.harness.config import MNIST_REDUCED, TrainConfig, format_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-path", required=True)
    ap.add_argument("--out-dir", default="runs/mnist")
    ap.add_argument("--train-count", type=int, default=10000)
    ap.add_argument("--test-count", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()

    config = TrainConfig(
        **MNIST_REDUCED,
        data_path=str(Path(args.data_path).expanduser()),
        train_count=args.train_count,
        test_count=args.test_count,
        epochs=args.epochs,
    )
    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as f:
        f.write(format_config(config))
    desk = Path(__file__).with_name("desk_run.py")
    cmd = [sys.executable, str(desk), "--config", f.name, "--out-dir", args.out_dir, "--repeats", str(args.repeats)]
    sys.exit(subprocess.call(cmd))


if __name__ == "__main__":
    main()
