import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wealthineq.domain import Household, owned_of, pattern_of  # noqa: E402


def make_household(hid="h1", weight=1.0, pattern_id=1, brackets=None, covariates=None, **kw):
    """Household with unit intercept-only covariates and [0, inf) brackets unless given."""
    owned = owned_of(pattern_id)
    if brackets is None:
        brackets = {l: (0.0, math.inf) for l in range(5) if owned[l]}
    if covariates is None:
        covariates = {l: (1.0,) for l in range(5) if owned[l]}
    return Household(
        id=hid,
        weight=weight,
        pattern=pattern_of(owned),
        covariates=tuple(covariates.get(l) if owned[l] else None for l in range(5)),
        component_brackets=tuple(brackets.get(l) if owned[l] else None for l in range(5)),
        **kw,
    )


def observed_households(values, weights=None, pattern_id=1, covariates=None, cap=1e12):
    """Fully observed households (degenerate brackets) from an (m, 5) array of levels."""
    values = np.asarray(values, float)
    weights = np.ones(len(values)) if weights is None else weights
    out = []
    for k, row in enumerate(values):
        owned = owned_of(pattern_id)
        br = {l: (float(row[l]), float(row[l])) for l in range(5) if owned[l]}
        cov = None if covariates is None else {l: tuple(covariates[k][l]) for l in range(5) if owned[l]}
        out.append(make_household(f"u{k}", float(weights[k]), pattern_id, br, cov, cap=cap))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20241015)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
