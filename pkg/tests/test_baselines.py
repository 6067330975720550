import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnrkit import slmm
from cnrkit.baselines import NmrConfig, nearest_indices, nmr_fit, nmr_impute
from cnrkit.geo import LocationSet

from conftest import planar_locs


def test_transect_example():
    obs_locs = LocationSet(np.array([[0.0, 0.0], [10.0, 0.0]]), "euclidean")
    target = LocationSet(np.array([[1.0, 0.0]]), "euclidean")
    assert nmr_impute(np.array([0.0, 1.0]), obs_locs, target, 2)[0, 0] == pytest.approx(0.5)
    assert nmr_impute(np.array([0.0, 1.0]), obs_locs, target, 1)[0, 0] == 0.0


def test_l_equals_m_gives_global_mean(rng):
    obs_locs, targets = planar_locs(rng, 9), planar_locs(rng, 4)
    obs = rng.normal(size=(9, 2))
    np.testing.assert_allclose(nmr_impute(obs, obs_locs, targets, NmrConfig(9)), np.tile(obs.mean(0), (4, 1)))


def test_nearest_indices_brute_force(rng):
    obs_locs, targets = planar_locs(rng, 30), planar_locs(rng, 12)
    idx = nearest_indices(obs_locs, targets, 5)
    for i, t in enumerate(targets.coords):
        d = np.hypot(*(obs_locs.coords - t).T)
        assert set(idx[i]) == set(np.argsort(d)[:5])


def test_ties_broken_by_station_order():
    obs_locs = LocationSet(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), "euclidean")
    target = LocationSet(np.array([[0.0, 0.0]]), "euclidean")
    np.testing.assert_array_equal(nearest_indices(obs_locs, target, 2), [[0, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_permutation_invariance_and_convexity(seed, L):
    rng = np.random.default_rng(seed)
    obs_locs, targets = planar_locs(rng, 15), planar_locs(rng, 5)
    obs = rng.normal(size=(15, 2))
    base = nmr_impute(obs, obs_locs, targets, L)
    perm = rng.permutation(15)
    moved = nmr_impute(obs[perm], LocationSet(obs_locs.coords[perm], "euclidean"), targets, L)
    np.testing.assert_allclose(moved, base, atol=1e-12)
    assert np.all(base >= obs.min(0) - 1e-12) and np.all(base <= obs.max(0) + 1e-12)


def test_errors(rng):
    with pytest.raises(ValueError):
        NmrConfig(0)
    with pytest.raises(ValueError):
        nmr_impute(np.zeros(3), planar_locs(rng, 3), planar_locs(rng, 2), 4)


def test_aligned_sites_recover_oracle(rng):
    locs = planar_locs(rng, 50)
    x = rng.normal(size=(50, 2))
    y = 1 + x @ [0.5, -1.0] + 0.2 * rng.normal(size=50)
    specs = [slmm.BasisSpec()] * 2
    f = nmr_fit(y, x, locs, locs, 1, specs)
    oracle = slmm.fit(y, slmm.build_design(x, specs), locs)
    np.testing.assert_allclose(f.beta, oracle.beta, atol=1e-12)
