import numpy as np
import pytest

from hcf.events import EventLog, SyntheticConfig, generate_synthetic


def random_log(seed, n_users=6, n_items=9, n_events=60, n_days=12):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, n_days, n_events)
    u = rng.integers(0, n_users, n_events)
    i = rng.integers(0, n_items, n_events)
    return EventLog.from_keys(t, [f"u{x:02d}" for x in u], [f"i{x:02d}" for x in i])


def small_synthetic(seed=0, **kw):
    cfg = dict(num_users=12, num_items=20, latent_dim=3, events_per_day=8, num_days=40,
               temperature=2.0, drift_std=0.1, stationary=True, seed=seed)
    cfg.update(kw)
    return generate_synthetic(SyntheticConfig(**cfg))


@pytest.fixture
def log():
    return random_log(0)


@pytest.fixture
def synth_log():
    return small_synthetic()


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
