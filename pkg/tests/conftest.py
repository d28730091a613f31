import gc

import pytest

from beamcorr.config import ExperimentConfig, load_preset
from beamcorr.detection import detect
from beamcorr.mcwf import SimulationPlan, simulate_beam


def run_streams(cfg, duration, seed, detectors=None):
    """Simulate ``cfg`` and return ``(streams, ledger)``; raw emissions are
    dropped straight after detection to keep memory flat."""
    events, ledger = simulate_beam(SimulationPlan(cfg, duration, seed))
    det = cfg.detectors if detectors is None else detectors
    streams = detect(events, cfg.layout, det, duration, seed, cfg.resolution_ps)
    del events
    gc.collect()
    return streams, ledger


def config(preset=None, **overrides):
    base = load_preset(preset) if preset else ExperimentConfig({})
    return base.with_overrides(overrides) if overrides else base


@pytest.fixture
def simulate():
    return run_streams


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
