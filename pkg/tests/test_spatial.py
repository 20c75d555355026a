import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import path_region, random_region
from frailscan.spatial import (ICAR_RHO, StudyRegion, ValidationError, build_neighbor_matrix,
                               car_conditional_moments, enumerate_windows, lattice_region,
                               leroux_matrix, leroux_precision, read_region, write_region)


def test_neighbor_matrix_single_edge():
    R = build_neighbor_matrix(path_region(2))
    assert_array_equal(R, [[1, -1], [-1, 1]])


def test_neighbor_matrix_path3():
    R = build_neighbor_matrix(path_region(3))
    assert_array_equal(R, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_neighbor_matrix_lattice_psd():
    R = build_neighbor_matrix(lattice_region(13, 13))
    assert_allclose(R.sum(axis=1), 0.0, atol=0)
    np.linalg.cholesky(R + 1e-9 * np.eye(169))
    lam = np.linalg.eigvalsh(R)
    assert lam[0] > -1e-10
    assert np.sum(lam < 1e-9) == 1


def test_disconnected_graph_warns():
    region = StudyRegion(["a", "b", "c"], np.zeros((3, 2)) + np.arange(3)[:, None],
                         [[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    with pytest.warns(UserWarning, match="disconnected"):
        R = build_neighbor_matrix(region)
    assert np.linalg.eigvalsh(R)[0] > -1e-12


def test_leroux_independence_limit():
    R = build_neighbor_matrix(lattice_region(4, 5))
    assert_array_equal(leroux_matrix(R, 0.0), np.eye(20))


def test_leroux_path3_half():
    A = leroux_matrix(build_neighbor_matrix(path_region(3)), 0.5)
    assert_allclose(A, [[1, -0.5, 0], [-0.5, 1.5, -0.5], [0, -0.5, 1]], atol=1e-15)


def test_leroux_icar_workaround():
    R = build_neighbor_matrix(lattice_region(5, 5))
    A = leroux_matrix(R, ICAR_RHO)
    assert ICAR_RHO == 0.999
    assert_allclose(A, 0.999 * R + 0.001 * np.eye(25), atol=1e-15)
    np.linalg.cholesky(A)


def test_leroux_rejects_rho_one():
    R = build_neighbor_matrix(path_region(3))
    with pytest.raises(ValueError, match="0.999"):
        leroux_precision(R, 1.0)
    with pytest.raises(ValueError):
        leroux_precision(R, 0.5, 0.0)


def test_leroux_precision_scales_by_sigma2():
    R = build_neighbor_matrix(path_region(4))
    pm = leroux_precision(R, 0.3, 2.5)
    assert_allclose(pm.A, leroux_matrix(R, 0.3))
    assert pm.sigma2 == 2.5


@pytest.mark.parametrize("rho", np.linspace(0, 0.999, 8))
def test_leroux_positive_definite(rho):
    np.linalg.cholesky(leroux_matrix(build_neighbor_matrix(lattice_region(6, 7)), rho))


def _conditional_from_joint(A, sigma2, x, k):
    # X ~ N(0, sigma2 A^-1): condition on X_{-k} with the covariance route
    S = sigma2 * np.linalg.inv(A)
    o = np.delete(np.arange(len(x)), k)
    w = np.linalg.solve(S[np.ix_(o, o)], S[o, k])
    return w @ x[o], S[k, k] - S[k, o] @ w


@pytest.mark.parametrize("rho", [0.2, 0.8])
def test_car_conditionals_match_joint(rng, rho):
    for _ in range(10):
        k = int(rng.integers(2, 7))
        region = random_region(rng, k)
        A = leroux_matrix(build_neighbor_matrix(region), rho)
        x = rng.standard_normal(k)
        for j in range(k):
            m, v = car_conditional_moments(region.adjacency, rho, 1.7, x, j)
            mj, vj = _conditional_from_joint(A, 1.7, x, j)
            assert abs(m - mj) < 1e-10 and abs(v - vj) < 1e-10


def test_windows_three_collinear_units():
    w = enumerate_windows(path_region(3), [10, 10, 10])
    sets = {frozenset(w.member_ids(i)) for i in range(len(w))}
    assert sets == {frozenset({"u1"}), frozenset({"u2"}), frozenset({"u3"})}
    assert all(w.n_individuals <= 15)


def test_windows_three_collinear_units_larger_cap():
    w = enumerate_windows(path_region(3), [10, 10, 40])
    sets = {frozenset(w.member_ids(i)) for i in range(len(w))}
    assert frozenset({"u1", "u2"}) in sets
    assert frozenset({"u1", "u2", "u3"}) not in sets
    assert all(w.n_individuals <= 30)


def test_windows_two_units():
    w = enumerate_windows(path_region(2), [5, 5])
    assert sorted(w.member_ids(i) for i in range(len(w))) == [("u1",), ("u2",)]


def test_windows_distance_ties_enter_together():
    # the center has two units at distance 1 and one at distance 2
    region = StudyRegion(["c", "l", "r", "far"], [[0, 0], [-1, 0], [1, 0], [2, 0]],
                         [[0, 1, 1, 0], [1, 0, 0, 0], [1, 0, 0, 1], [0, 0, 1, 0]])
    w = enumerate_windows(region, [10, 10, 10, 100])
    from_c = [set(w.member_ids(i)) for i in range(len(w)) if w.centers[i] == 0]
    assert from_c == [{"c"}, {"c", "l", "r"}]


def _brute_force_windows(region, counts):
    d2 = ((region.coords[:, None, :] - region.coords[None, :, :]) ** 2).sum(-1)
    N, K = sum(counts), region.n_units
    seen = set()
    for c in range(K):
        for b in range(K):
            members = frozenset(np.flatnonzero(d2[c] <= d2[c, b]).tolist())
            if len(members) < K and sum(counts[m] for m in members) <= N / 2:
                seen.add(members)
    return seen


def test_windows_match_brute_force_lattice169():
    region = lattice_region(13, 13)
    counts = np.full(169, 10)
    w = enumerate_windows(region, counts)
    sets = [frozenset(w.members(i).tolist()) for i in range(len(w))]
    assert len(sets) == len(set(sets))
    assert set(sets) == _brute_force_windows(region, counts)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_windows_match_brute_force_random(k, seed):
    rng = np.random.default_rng(seed)
    region = random_region(rng, k)
    counts = rng.integers(1, 20, k)
    w = enumerate_windows(region, counts)
    sets = [frozenset(w.members(i).tolist()) for i in range(len(w))]
    assert len(sets) == len(set(sets))
    assert set(sets) == _brute_force_windows(region, counts)
    assert np.all(w.n_individuals <= counts.sum() / 2)
    assert np.all(w.n_individuals >= 1)


def test_windows_nested_by_radius():
    region = lattice_region(7, 6)
    w = enumerate_windows(region, np.full(42, 3))
    for c in np.unique(w.centers):
        idx = np.flatnonzero(w.centers == c)
        prev = set()
        for i in idx[np.argsort(w.sizes[idx])]:
            cur = set(w.member_ids(i))
            assert prev < cur
            prev = cur


def test_window_contains_disc():
    region = lattice_region(5, 5)
    w = enumerate_windows(region, np.full(25, 4))
    d2 = ((region.coords[:, None] - region.coords[None]) ** 2).sum(-1)
    for i in range(len(w)):
        m = w.members(i)
        c = w.centers[i]
        radius = d2[c, m].max()
        assert set(np.flatnonzero(d2[c] <= radius)) == set(m.tolist())


def test_region_round_trip(tmp_path):
    region = lattice_region(3, 4, drop=[(0, 0)])
    write_region(region, tmp_path / "u.csv", tmp_path / "a.csv")
    back = read_region(tmp_path / "u.csv", tmp_path / "a.csv")
    assert back.unit_ids == region.unit_ids
    assert_array_equal(back.coords, region.coords)
    assert_array_equal(back.adjacency, region.adjacency)


def test_read_region_errors(tmp_path):
    (tmp_path / "u.csv").write_text("unit_id,x,y\na,0,0\nb,1,0\n")
    (tmp_path / "a.csv").write_text("unit_id_a,unit_id_b\na,zz\n")
    with pytest.raises(ValidationError) as exc:
        read_region(tmp_path / "u.csv", tmp_path / "a.csv")
    assert exc.value.source == "adjacency"
    (tmp_path / "u.csv").write_text("unit_id,x,y\na,0,0\na,1,0\n")
    (tmp_path / "a.csv").write_text("a,a\n")
    with pytest.raises(ValidationError) as exc:
        read_region(tmp_path / "u.csv", tmp_path / "a.csv")
    assert exc.value.source == "units"


def test_region_rejects_single_unit_and_self_loops():
    with pytest.raises(ValidationError):
        StudyRegion(["a"], [[0, 0]], [[0]])
    with pytest.raises(ValidationError):
        StudyRegion(["a", "b"], [[0, 0], [1, 0]], [[1, 1], [1, 0]])
    with pytest.raises(ValidationError):
        StudyRegion(["a", "b"], [[0, 0], [1, 0]], [[0, 1], [0, 0]])


def test_window_lookup_by_members():
    region = lattice_region(3, 3)
    w = enumerate_windows(region, np.full(9, 2))
    i = w.find(["r1c1"])
    assert w.member_ids(i) == ("r1c1",)
    assert w.find(["r0c0", "r2c2"]) is None
    cw = w.window(i)
    assert cw.center_unit == "r1c1" and cw.n_individuals == 2
    assert_array_equal(w.indicator()[i], np.eye(9)[4])
