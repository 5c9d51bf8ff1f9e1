from pathlib import Path

import numpy as np
import pytest

from cpawarp import PriorConfig, make_basis, make_tessellation, sample_prior

FIXTURES = Path(__file__).parent / "fixtures"


def unit_basis(n_cells, kind="svd", zero_boundary=True, **kw):
    return make_basis(make_tessellation(0.0, 1.0, n_cells), kind, zero_boundary, **kw)


def prior_draws(basis, count, lambda_sigma=1e-2, lambda_s=0.1, seed=0):
    return sample_prior(basis, PriorConfig(lambda_sigma, lambda_s, seed), count)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
