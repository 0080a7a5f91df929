import pytest

VERDICTS = pytest.StashKey[list]()

from specdiff.denoiser import DRAFTER_COST, MlpDenoiser
from specdiff.env import FEATURE_DIM, PushEnvConfig, generate_dataset
from specdiff.policy import DiffusionPolicy
from specdiff.schedule import build_schedule


@pytest.fixture(scope="session")
def tiny_policy():
    """Untrained closed-loop bundle: short schedule, short episodes."""
    cfg = PushEnvConfig(max_steps=40)
    data = generate_dataset(4, 0, cfg)
    sched = build_schedule(12, 1e-4, 0.1)
    target = MlpDenoiser(cfg.action_dim, FEATURE_DIM, 12, (24, 24), seed=0)
    drafter = MlpDenoiser(cfg.action_dim, FEATURE_DIM, 12, (8,), seed=1, cost_weight=DRAFTER_COST)
    return DiffusionPolicy(target, drafter, sched, data)


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Print and record a ``CRITERION n: PASS|FAIL`` line, then assert it."""

    def check(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append(line)
        print(f"\n{line}", flush=True)
        assert ok, detail

    return check
