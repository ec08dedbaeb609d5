import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from poseface import pipeline
from poseface.config import RunConfig

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def _bench(root, **overrides):
    cfg = RunConfig(out=str(root), data_dir=str(root), **overrides)
    pipeline.run_gen_data(cfg)
    return cfg, pipeline.run_pretrain_ae(cfg)


@pytest.fixture(scope="session")
def default_bench(tmp_path_factory):
    """Default benchmark (64 ids x 80 samples) with its pretrained autoencoder."""
    return _bench(tmp_path_factory.mktemp("default_bench"))


@pytest.fixture(scope="session")
def profile_bench(tmp_path_factory):
    """Same benchmark with 5% profile faces in training."""
    return _bench(tmp_path_factory.mktemp("profile_bench"), p_profile=0.05)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_VERDICTS[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
