import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""

    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_run():
    """Default glyph protocol: train, fit the probe, evaluate both policies on the test split.

    Shared by every test that needs a trained model; runs once per session.
    """
    import time
    from types import SimpleNamespace

    from imago.harness.config import TrainConfig
    from imago.harness.evaluation import evaluate
    from imago.harness.training import load_split, train, train_probe

    config = TrainConfig()
    train_scenes, train_labels = load_split(config, "train")
    test_scenes, test_labels = load_split(config, "test")
    start = time.perf_counter()
    result = train(config, train_scenes)
    probe = train_probe(
        result.agent, train_scenes, train_labels, config.timesteps, 0, config.probe_epochs, config.probe_hidden
    )
    rows = evaluate(
        result.agent, test_scenes, test_labels, probe, timesteps=config.timesteps, n=config.n_eval, seed=0, repeats=config.repeats
    )
    return SimpleNamespace(
        config=config,
        result=result,
        probe=probe,
        rows={(r.policy, r.t): r for r in rows},
        train=(train_scenes, train_labels),
        test=(test_scenes, test_labels),
        seconds=time.perf_counter() - start,
    )
