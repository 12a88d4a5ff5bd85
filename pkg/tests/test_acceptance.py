"""Acceptance criteria, one test each, every one reporting a PASS/FAIL line.

Criteria 5-8 share one training run of the default glyph protocol
(``trained_run`` in conftest), evaluated on 200 held-out scenes with 10
evaluation seeds and 100 hypotheses per step.
"""

import subprocess
import sys
import time

import numpy as np
import pytest
from helpers import negative_objective, toy_agent, toy_episode

from imago import diffcore as dc
from imago.datasets import read_idx, read_idx_header, write_idx
from imago.flows import BnafConfig, ConditionalBnaf, flow_log_density, invert_bnaf, numeric_jacobian_oracle
from imago.harness.config import TrainConfig, format_config
from imago.vae import SceneVae, VaeConfig, timestep_objective

T_HORIZON = 5


def test_c01_gradient_soundness(report_criterion):
    agent = toy_agent(seed=0)
    episode = toy_episode(seed=1, batch=1, timesteps=2)
    program = negative_objective(agent, episode, route=False)
    params = agent.parameters()
    start = time.perf_counter()
    an = dc.analytic_gradient(program, (), params)
    fd = dc.finite_difference_gradient(program, (), params, 1e-5)
    seconds = time.perf_counter() - start
    worst = max(dc.relative_error(an[k], fd[k], floor=1e-7).max() for k in an)
    max_abs = max(np.abs(an[k] - fd[k]).max() for k in an)
    ok = worst <= 1e-4 and seconds < 60
    detail = f"{sum(p.size for p in params)} params, worst rel err {worst:.2e} (max abs diff {max_abs:.1e}), {seconds:.1f}s"
    assert report_criterion(1, "gradient of -sum_t L_t vs finite differences", ok, detail)


def test_c02_flow_log_det_exactness(report_criterion):
    start = time.perf_counter()
    worst_rel, worst_upper, min_diag = 0.0, 0.0, np.inf
    for d in (2, 3, 5):
        rng = np.random.default_rng(d)
        for _ in range(100):
            # two hidden (tanh) layers of width 4d: three block-masked affine layers
            flow = ConditionalBnaf(BnafConfig(d, 4, 3, 3), "f", rng, noise=1.0)
            z, h = rng.normal(size=d), rng.normal(size=3)
            log_det = flow(z, h).log_det.item()
            jac = numeric_jacobian_oracle(flow, z, h)
            _, logabs = np.linalg.slogdet(jac)
            worst_rel = max(worst_rel, abs(log_det - logabs) / max(1.0, abs(log_det)))
            worst_upper = max(worst_upper, np.abs(np.triu(jac, 1)).max(initial=0.0))
            min_diag = min(min_diag, np.diag(jac).min())
    seconds = time.perf_counter() - start
    ok = worst_rel <= 1e-5 and worst_upper <= 1e-8 and min_diag > 0 and seconds < 60
    detail = f"worst rel {worst_rel:.1e}, max upper {worst_upper:.1e}, min diag {min_diag:.2e}, {seconds:.1f}s"
    assert report_criterion(2, "flow log-det exactness", ok, detail)


def test_c03_flow_normalization(report_criterion):
    model = SceneVae(VaeConfig(pixels=4, latent_dim=2, feature_dim=3), np.random.default_rng(0))
    model.unwarp_flow.initialize(np.random.default_rng(1), noise=0.5)
    flow = model.unwarp_flow
    h = np.array([0.7, -0.3, 1.1])
    n, lo, hi = 200, -6.0, 6.0
    step = (hi - lo) / n
    mid = lo + step * (np.arange(n) + 0.5)
    grid = np.stack(np.meshgrid(mid, mid, indexing="ij"), -1).reshape(-1, 2)
    z, inside = invert_bnaf(flow, grid, h, iters=60)
    with dc.no_record():
        out = flow(z, np.broadcast_to(h, (len(z), 3)))
    base = -np.log(2 * np.pi) - 0.5 * (z**2).sum(-1)
    density = np.where(inside, np.exp(flow_log_density(base, out).data), 0.0)
    mass = density.sum() * step**2
    assert report_criterion(3, "pushed-forward density integrates to 1", 0.98 <= mass <= 1.02, f"mass {mass:.5f}")


def test_c04_kl_sanity(report_criterion):
    rng = np.random.default_rng(0)
    config = VaeConfig(pixels=36, latent_dim=4, feature_dim=5, encoder_hidden=(8,), decoder_hidden=(8,))
    model = SceneVae(config, rng)
    model.warp_flow.near_identity()
    model.unwarp_flow.near_identity()
    head = model.encoder.layers[-1]
    head.weight.data = np.zeros(head.weight.shape)
    head.bias.data = np.zeros(head.bias.shape)
    n = 10_000
    scene = (rng.random((n, 36)) > 0.5).astype(float)
    h = np.repeat(rng.normal(size=(1, 5)), n, axis=0)
    terms = timestep_objective(model, scene, h, np.ones((n, 36)), rng.standard_normal((n, 4)), rng.standard_normal((n, 4)))
    means = {k: float(terms.terms()[k].data.mean()) for k in ("t2", "t3", "t5")}
    ok = all(abs(v) <= 0.02 for v in means.values())
    detail = ", ".join(f"{k} {v:+.2e}" for k, v in means.items())
    assert report_criterion(4, "KL estimates vanish for matching Gaussians", ok, detail)


def _series(run, policy, field):
    return [getattr(run.rows[(policy, t)], field) for t in range(1, T_HORIZON + 1)]


@pytest.mark.slow
def test_c05_convergence_trend(trained_run, report_criterion):
    bce = _series(trained_run, "uncertainty", "bce")
    ratio = bce[3] / bce[0]
    detail = f"BCE t1 {bce[0]:.4f} t4 {bce[3]:.4f} ratio {ratio:.3f} (train {trained_run.seconds:.0f}s)"
    assert report_criterion(5, "hypotheses converge to the scene", ratio <= 0.7, detail)


@pytest.mark.slow
def test_c06_policy_superiority(trained_run, report_criterion):
    unc, rnd = _series(trained_run, "uncertainty", "bce"), _series(trained_run, "random", "bce")
    var = _series(trained_run, "uncertainty", "max_var")
    better = unc[2] < rnd[2]
    falling = all(a > b for a, b in zip(var[:4], var[1:4]))
    detail = f"BCE t3 {unc[2]:.4f} vs random {rnd[2]:.4f}; max V_t t1..t4 " + " ".join(f"{v:.4f}" for v in var[:4])
    assert report_criterion(6, "uncertainty sensing beats random", better and falling, detail)


@pytest.mark.slow
def test_c07_category_entropy_trend(trained_run, report_criterion):
    unc = _series(trained_run, "uncertainty", "cat_entropy")
    rnd = _series(trained_run, "random", "cat_entropy")
    ok = unc[3] < unc[0] and all(u <= r + 0.05 for u, r in zip(unc, rnd))
    detail = "uncertainty " + " ".join(f"{v:.3f}" for v in unc) + " | random " + " ".join(f"{v:.3f}" for v in rnd)
    assert report_criterion(7, "category entropy falls", ok, detail)


@pytest.mark.slow
def test_c08_probe_accuracy_trend(trained_run, report_criterion):
    acc = _series(trained_run, "uncertainty", "probe_acc")
    slope = np.polyfit(np.arange(1, T_HORIZON + 1), acc, 1)[0]
    ok = slope >= 0 and acc[1] > 0.1 and acc[4] >= 0.6
    detail = "accuracy " + " ".join(f"{v:.3f}" for v in acc) + f", slope {slope:+.3f}"
    assert report_criterion(8, "probe accuracy rises", ok, detail)


DETERMINISM_CONFIG = TrainConfig(
    height=12, width=12, glimpse=4, timesteps=3, latent_dim=4, feature_dim=8, embed_dim=8,
    encoder_hidden=(16,), decoder_hidden=(16,), flow_multiplier=2,
    train_count=64, test_count=12, epochs=2, batch_size=16, n_eval=6, repeats=2,
    probe_epochs=2, probe_hidden=8,
)  # fmt: skip


def _cli_run(root, config_path):
    def run(*args):
        proc = subprocess.run([sys.executable, "-m", "imago", *map(str, args)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr

    ckpt, probe, csv, pgm = root / "agent.ckpt", root / "probe.ckpt", root / "metrics.csv", root / "hyp.pgm"
    run("train", "--config", config_path, "--out", ckpt)
    run("probe", "--checkpoint", ckpt, "--out", probe)
    run("eval", "--checkpoint", ckpt, "--policy", "both", "--samples", 6, "--seed", 3, "--out-csv", csv, "--probe", probe)
    run("imagine", "--checkpoint", ckpt, "--scene-index", 1, "--policy", "uncertainty", "--timesteps", 3,
        "--samples", 4, "--seed", 3, "--out-pgm", pgm)  # fmt: skip
    return {p.name: p.read_bytes() for p in (ckpt, probe, csv, pgm)}


def test_c09_end_to_end_determinism(tmp_path, report_criterion):
    config_path = tmp_path / "run.cfg"
    config_path.write_text(format_config(DETERMINISM_CONFIG))
    outputs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        outputs.append(_cli_run(tmp_path / name, config_path))
    same = [k for k in outputs[0] if outputs[0][k] == outputs[1][k]]
    ok = len(same) == len(outputs[0])
    assert report_criterion(9, "train + eval are byte-identical across runs", ok, f"identical: {', '.join(same)}")


def test_c10_idx_ingestion(tmp_path, report_criterion):
    arr = np.random.default_rng(0).integers(0, 256, size=(100, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "rt-idx3-ubyte", arr)
    back = read_idx(tmp_path / "rt-idx3-ubyte")
    exact = back.dtype == np.uint8 and back.shape == arr.shape and back.tobytes() == arr.tobytes()
    header = bytes.fromhex("00000803") + (10000).to_bytes(4, "big") + (28).to_bytes(4, "big") * 2
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(header + bytes(10000 * 28 * 28))
    _, dims = read_idx_header(tmp_path / "t10k-images-idx3-ubyte")
    shape = read_idx(tmp_path / "t10k-images-idx3-ubyte").shape
    ok = exact and list(dims) == [10000, 28, 28] and shape == (10000, 28, 28)
    assert report_criterion(10, "IDX round trip and MNIST header", ok, f"round trip exact={exact}, dims {list(dims)}")

