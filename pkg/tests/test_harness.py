import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imago.agent import HypothesisSet
from imago.datasets import generate_glyphs, read_idx
from imago.harness import training
from imago.harness.cli import main
from imago.harness.config import TrainConfig, format_config, load_config, parse_config_text
from imago.harness.evaluation import bce, bce_from_logits, category_entropy, evaluate
from imago.harness.serialization import (
    CSV_HEADER,
    Checkpoint,
    CheckpointVersionError,
    MetricsRow,
    checkpoint_bytes,
    export_pgm_grid,
    load_checkpoint,
    observation_composite,
    read_metrics_csv,
    read_pgm,
    save_checkpoint,
    write_metrics_csv,
)
from imago.harness.training import (
    NonFiniteLossError,
    Probe,
    build_agent,
    initial_reconstruction_nats,
    load_split,
    module_state,
    posterior_latents,
    probe_checkpoint,
    probe_from_checkpoint,
    train,
    train_probe,
)

TINY = TrainConfig(
    height=12,
    width=12,
    glimpse=4,
    timesteps=3,
    latent_dim=4,
    feature_dim=8,
    embed_dim=8,
    encoder_hidden=(16,),
    decoder_hidden=(16,),
    flow_multiplier=2,
    train_count=40,
    test_count=10,
    epochs=2,
    batch_size=16,
    n_eval=5,
    repeats=2,
    probe_epochs=2,
    probe_hidden=8,
)


def _state_hash(module):
    h = hashlib.sha256()
    for name, arr in sorted(module_state(module).items()):
        h.update(name.encode() + arr.tobytes())
    return h.hexdigest()


# --- config -----------------------------------------------------------------


def test_config_defaults_and_invariants():
    cfg = TrainConfig()
    assert (cfg.height, cfg.glimpse, cfg.timesteps, cfg.latent_dim, cfg.batch_size) == (16, 6, 5, 16, 64)
    assert cfg.lr == 1e-3 and cfg.epochs == 30 and cfg.clip_norm == 10.0 and cfg.repeats == 10
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(timesteps=30, glimpse=6)  # 30 * 36 > 4 * 256
    with pytest.raises(ValueError):
        TrainConfig(glimpse=17)
    with pytest.raises(ValueError):
        TrainConfig(dataset="svhn")


def test_config_text_format(tmp_path):
    text = "# desk run\nepochs = 3   # short\n\nencoder_hidden = 32,16\nroute_gradients = false\nlr=0.01\n"
    cfg = parse_config_text(text)
    assert cfg.epochs == 3 and cfg.encoder_hidden == (32, 16) and cfg.route_gradients is False and cfg.lr == 0.01
    p = tmp_path / "c.cfg"
    p.write_text(format_config(TINY))
    assert load_config(p) == TINY
    assert TrainConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("colour = red")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("epochs 3")


# --- checkpoint ---------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    special = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324, 1.0 / 3.0])
    params = {"b": special, "a.w": np.random.default_rng(0).normal(size=(3, 4)), "s": np.array(2.5)}
    ckpt = Checkpoint(params, TINY.to_dict(), step=17)
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, ckpt)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(b"IMAGO1\n")
    for k, v in params.items():
        assert loaded.params[k].tobytes() == v.tobytes() and loaded.params[k].shape == v.shape
    assert loaded.step == 17 and TrainConfig.from_dict(loaded.config) == TINY


def test_checkpoint_version_and_corruption(tmp_path):
    p = tmp_path / "v2.ckpt"
    save_checkpoint(p, Checkpoint({"x": np.ones(2)}, version=2))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)
    p.write_bytes(b"IMAGO9\n" + bytes(8))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)
    p.write_bytes(checkpoint_bytes(Checkpoint({"x": np.ones(2)})) + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(p)
    p.write_bytes(b"P5\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_agent_checkpoint_restores_agent(tmp_path):
    agent = build_agent(TINY, seed=3)
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, Checkpoint(module_state(agent), TINY.to_dict()))
    restored, cfg = training.agent_from_checkpoint(load_checkpoint(p))
    assert cfg == TINY and _state_hash(restored) == _state_hash(agent)


# --- CSV / PGM ------------------------------------------------------------------


def test_metrics_csv_layout(tmp_path):
    rows = [MetricsRow(pol, t, 0.1 * t, 0.01, None if pol == "random" else 1.5, 0.5) for pol in ("uncertainty", "random") for t in (1, 2, 3)]
    p = tmp_path / "m.csv"
    write_metrics_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 1 + 6
    assert lines[4].startswith("random,1,") and ",," in lines[4]
    assert read_metrics_csv(p) == rows


@settings(max_examples=50)
@given(st.floats(allow_nan=False, allow_infinity=False), st.floats(0, 1))
def test_metrics_csv_floats_round_trip(tmp_path_factory, a, b):
    p = tmp_path_factory.mktemp("csv") / "m.csv"
    write_metrics_csv([MetricsRow("uncertainty", 1, a, b, b, b)], p)
    row = read_metrics_csv(p)[0]
    assert row.bce == a and row.max_var == b


def test_pgm_single_tile_layout(tmp_path):
    scene = np.ones((16, 16))
    hyp = np.zeros((1, 16, 16))
    p = tmp_path / "g.pgm"
    export_pgm_grid([(scene, hyp)], p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n33 16\n255\n") and len(raw) == len(b"P5\n33 16\n255\n") + 16 * 33
    img = read_pgm(p)
    assert img.shape == (16, 33)
    assert np.all(img[:, :16] == 255) and np.all(img[:, 16] == 255) and np.all(img[:, 17:] == 0)


def test_pgm_grid_rows_are_timesteps(tmp_path):
    rows = [(np.full((4, 5), 0.5), np.full((3, 4, 5), 0.2)) for _ in range(2)]
    p = tmp_path / "g.pgm"
    export_pgm_grid(rows, p)
    img = read_pgm(p)
    assert img.shape == (2 * 5 - 1, 4 * 6 - 1)
    assert img[0, 0] == round(0.5 * 255) and img[0, 6] == round(0.2 * 255) and img[4, 0] == 255


def test_observation_composite():
    scene = np.array([[1.0, 0.0], [0.0, 1.0]])
    mask = np.array([[1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(observation_composite(scene, mask), [[1.0, 0.0], [0.5, 0.5]])


# --- metrics --------------------------------------------------------------------


def test_category_entropy_extremes():
    assert category_entropy(np.full(100, 3)).item() == 0.0
    assert category_entropy(np.arange(100) % 10).item() == pytest.approx(math.log(10), abs=1e-12)
    assert category_entropy(np.array([[1, 1, 2, 2]])).item() == pytest.approx(math.log(2))


def test_perfect_hypotheses_score_zero():
    truth = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    hyp = HypothesisSet.from_samples(np.repeat(truth[None], 5, axis=0), np.zeros((5, 2)))
    assert bce(hyp.samples, truth).mean() < 1e-10
    assert hyp.variance_map.max() == 0.0
    logits = np.where(truth > 0, 40.0, -40.0)
    assert bce_from_logits(logits, truth).mean() < 1e-16


def test_bce_matches_probability_form():
    rng = np.random.default_rng(1)
    logits = rng.normal(0, 3, size=50)
    truth = (rng.random(50) > 0.5).astype(float)
    np.testing.assert_allclose(bce_from_logits(logits, truth), bce(1 / (1 + np.exp(-logits)), truth), rtol=1e-10)


def test_evaluate_rows_bounds_and_read_only():
    agent = build_agent(TINY, seed=1)
    scenes, labels = load_split(TINY, "test")
    probe = Probe(TINY.latent_dim, 8, np.random.default_rng(2))
    before = _state_hash(agent)
    rows = evaluate(agent, scenes, labels, probe, timesteps=3, n=6, seed=0, repeats=2, chunk=4)
    assert _state_hash(agent) == before
    assert [(r.policy, r.t) for r in rows] == [(p, t) for p in ("uncertainty", "random") for t in (1, 2, 3)]
    for r in rows:
        assert r.bce >= 0 and 0 <= r.max_var <= 0.25
        assert 0 <= r.cat_entropy <= math.log(10) + 1e-12 and 0 <= r.probe_acc <= 1
    # shared first fixation: t=1 identical across policies
    assert rows[0].bce == rows[3].bce and rows[0].max_var == rows[3].max_var
    bare = evaluate(agent, scenes, labels, None, ("random",), timesteps=2, n=3, seed=0, repeats=1)
    assert len(bare) == 2 and all(r.cat_entropy is None and r.probe_acc is None for r in bare)


# --- training -------------------------------------------------------------------


def test_initial_reconstruction_is_uninformative():
    cfg = TrainConfig()
    scenes, _ = load_split(cfg.replace(train_count=64), "train")
    assert abs(initial_reconstruction_nats(cfg, scenes) - math.log(2)) <= 0.15


def test_training_is_deterministic():
    a = train(TINY)
    b = train(TINY)
    assert a.loss_log == b.loss_log and len(a.loss_log) == TINY.epochs
    assert checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint())
    assert a.step == TINY.epochs * math.ceil(TINY.train_count / TINY.batch_size)
    assert set(a.term_log[0]) == {"t1", "t2", "t3", "t4", "t5"}


def test_non_finite_loss_names_term(monkeypatch):
    real = training.build_agent

    def broken(config, seed=None):
        agent = real(config, seed)
        agent.vae.decoder.layers[-1].bias.data = np.full(config.height * config.width, np.nan)
        return agent

    monkeypatch.setattr(training, "build_agent", broken)
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLossError) as info:
        train(TINY)
    assert info.value.term == "t1" and "t1" in str(info.value)


def test_probe_training_leaves_agent_frozen(tmp_path):
    agent = build_agent(TINY, seed=4)
    scenes, labels = load_split(TINY, "train")
    before = _state_hash(agent)
    probe = train_probe(agent, scenes, labels, TINY.timesteps, seed=0, epochs=3, hidden=8)
    assert _state_hash(agent) == before
    save_checkpoint(tmp_path / "p.ckpt", probe_checkpoint(probe))
    restored = probe_from_checkpoint(load_checkpoint(tmp_path / "p.ckpt"))
    z = posterior_latents(agent, scenes, TINY.timesteps)
    np.testing.assert_array_equal(restored.predict(z), probe.predict(z))
    with pytest.raises(ValueError):
        probe_from_checkpoint(Checkpoint({}, kind="agent"))


def test_random_probe_is_at_chance():
    _, labels = generate_glyphs(5, 2000)
    z = np.random.default_rng(6).normal(size=(2000, 16))
    probe = Probe(16, 64, np.random.default_rng(7))
    assert abs((probe.predict(z) == labels).mean() - 0.1) <= 0.03


# --- CLI -----------------------------------------------------------------------------


def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--config", "x", "--bogus", "1"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--checkpoint", "c", "--policy", "greedy", "--out-csv", "o"]) == 1


def test_cli_module_entry_without_arguments():
    proc = subprocess.run([sys.executable, "-m", "imago"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_cli_runtime_error_exit_code(tmp_path):
    assert main(["probe", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "p")]) == 2


def test_cli_gen_data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--seed", "3", "--count", "25", "--out", str(out)]) == 0
    images, labels = read_idx(out / "images-idx3-ubyte"), read_idx(out / "labels-idx1-ubyte")
    want, want_labels = generate_glyphs(3, 25)
    np.testing.assert_array_equal(images, want * 255)
    np.testing.assert_array_equal(labels, want_labels)


def _pipeline(root, cfg_path):
    ckpt, probe, csv, pgm = root / "agent.ckpt", root / "probe.ckpt", root / "m.csv", root / "h.pgm"
    assert main(["train", "--config", str(cfg_path), "--out", str(ckpt)]) == 0
    assert main(["probe", "--checkpoint", str(ckpt), "--out", str(probe)]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--policy", "both", "--samples", "4", "--seed", "1",
                 "--out-csv", str(csv), "--probe", str(probe)]) == 0  # fmt: skip
    assert main(["imagine", "--checkpoint", str(ckpt), "--scene-index", "2", "--policy", "uncertainty",
                 "--timesteps", "3", "--samples", "2", "--seed", "1", "--out-pgm", str(pgm)]) == 0  # fmt: skip
    return [p.read_bytes() for p in (ckpt, probe, csv, pgm)]


def test_cli_pipeline_rows_and_determinism(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(format_config(TINY))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _pipeline(tmp_path / "a", cfg_path)
    second = _pipeline(tmp_path / "b", cfg_path)
    assert first == second
    rows = read_metrics_csv(tmp_path / "a" / "m.csv")
    assert len(rows) == 2 * TINY.timesteps
    img = read_pgm(tmp_path / "a" / "h.pgm")
    assert img.shape == (3 * 13 - 1, 3 * 13 - 1)
    assert (tmp_path / "a" / "agent.ckpt.loss.csv").read_text().startswith("epoch,loss\n0,")
    assert main(["imagine", "--checkpoint", str(tmp_path / "a" / "agent.ckpt"), "--scene-index", "99",
                 "--out-pgm", str(tmp_path / "x.pgm")]) == 2  # fmt: skip
