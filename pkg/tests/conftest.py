import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from morphodiff import denoiser as dn

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE = os.path.join(ROOT, ".cache")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(seed=0, E=8, H=8, n_classes=3, scale=0.3):
    """Small denoiser with every block non-zero, for gradient checks."""
    p = dn.DenoiserParams.init(seed, E, H, n_classes)
    r = np.random.default_rng(seed + 99)
    for name in p.names:
        if name == "freqs":
            continue
        a = p.arrays[name]
        if name.startswith("b_") or name == "W_d2":
            p.arrays[name] = r.normal(0, scale, a.shape)
    return p


@pytest.fixture
def small_params():
    return random_params()


ACCEPTANCE: list = []


def report(tag: str, ok: bool, detail: str = "") -> bool:
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE.append(f"{tag} {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
