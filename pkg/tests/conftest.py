import numpy as np
import pytest

from cnrkit.covariate_field import CovariateFieldParams, MarginalCovariateParams, ar1_correlation
from cnrkit.geo import LocationSet, MaternParams


def planar_locs(rng, n, scale=10.0):
    return LocationSet(rng.uniform(0, scale, size=(n, 2)), "euclidean")


def random_field_params(rng, k, *, tau=None, nu=0.5):
    marg = tuple(
        MarginalCovariateParams(
            float(rng.normal()),
            MaternParams(float(rng.uniform(0.5, 2.0)), nu, float(rng.uniform(0.2, 1.0)),
                         float(rng.uniform(0.05, 0.3)) if tau is None else tau),
        )
        for _ in range(k)
    )
    a = rng.normal(size=(k, k))
    cov = a @ a.T + k * np.eye(k)
    d = np.sqrt(np.diag(cov))
    return CovariateFieldParams(marg, cov / d[:, None] / d[None, :])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ar1():
    return ar1_correlation


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def check(tag, ok, detail=""):
        _CRITERIA.append(f"criterion {tag}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        assert ok, f"criterion {tag} failed: {detail}"

    def skip(tag, reason):
        _CRITERIA.append(f"criterion {tag}: SKIP  {reason}")
        pytest.skip(reason)

    check.skip = skip
    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
