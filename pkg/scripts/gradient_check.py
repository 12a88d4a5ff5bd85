"""Per-parameter finite-difference check of the full objective on a toy agent.

    python3 scripts/gradient_check.py            # true gradient of -sum_t L_t
    python3 scripts/gradient_check.py --routed   # routed surrogate vs its own oracle

Toy scale: 6x6 scenes, d=4, T=2, w=3.  In routed mode the extractor is
checked against finite differences of -(-t3 + t4 - t5) only, since it sees
t1/t2 through a stop-gradient.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from helpers import negative_objective, toy_agent, toy_episode  # noqa: E402

from imago import diffcore as dc  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--routed", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--step", type=float, default=1e-5)
    args = ap.parse_args()

    agent = toy_agent(args.seed)
    episode = toy_episode(args.seed + 1)
    params = agent.parameters()
    start = time.perf_counter()
    an = dc.analytic_gradient(negative_objective(agent, episode, args.routed), (), params)
    if args.routed:
        ext = agent.extractor.parameters()
        rest = [p for p in params if all(p is not q for q in ext)]
        fd = dc.finite_difference_gradient(negative_objective(agent, episode, False, ("t3", "t4", "t5")), (), ext, args.step)
        fd.update(dc.finite_difference_gradient(negative_objective(agent, episode, False), (), rest, args.step))
    else:
        fd = dc.finite_difference_gradient(negative_objective(agent, episode, False), (), params, args.step)

    print(f"{'parameter':<36}{'size':>6}{'max rel':>10}{'max abs':>10}")
    for name in an:
        rel = dc.relative_error(an[name], fd[name]).max()
        gap = np.abs(an[name] - fd[name]).max()
        print(f"{name:<36}{an[name].size:>6}{rel:>10.1e}{gap:>10.1e}")
    worst = max(dc.relative_error(an[k], fd[k]).max() for k in an)
    print(f"worst {worst:.2e} over {sum(p.size for p in params)} parameters in {time.perf_counter() - start:.1f}s")
    sys.exit(0 if worst <= 1e-4 else 1)


if __name__ == "__main__":
    main()
