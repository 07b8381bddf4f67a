import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallmass.errors import GridMismatchError
from smallmass.noisegrid import (
    block_sum,
    coarsen,
    generate_path,
    increment_at,
    mass_family,
    path_batch,
    standard_normals,
)


def test_deterministic_regeneration():
    a = generate_path(7, 3, 100, 2, 0.01)
    b = generate_path(7, 3, 100, 2, 0.01)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, generate_path(7, 4, 100, 2, 0.01).increments)
    assert not np.array_equal(a.increments, generate_path(8, 3, 100, 2, 0.01).increments)


def test_single_increment_regenerates():
    p = generate_path(11, 5, 40, 3, 0.02)
    for i, rho in [(0, 0), (7, 2), (39, 1)]:
        assert increment_at(11, 5, i, rho, 3, 0.02) == p.increments[i, rho]


def test_offset_draws_match_prefix():
    full = standard_normals(1, 2, 0, 50)
    assert np.array_equal(standard_normals(1, 2, 13, 20), full[13:33])


def test_endpoint_and_partial_sums():
    p = generate_path(1, 0, 64, 2, 0.5)
    assert np.allclose(p.endpoint, p.increments.sum(axis=0), atol=0)
    W = p.partial_sums()
    assert W.shape == (65, 2) and np.all(W[0] == 0.0)
    assert np.allclose(W[-1], p.endpoint, atol=1e-13)
    assert p.T == pytest.approx(32.0)


def test_sample_variance():
    dt = 0.01
    p = generate_path(2024, 0, 10**6, 1, dt)
    var = np.var(p.increments)
    assert 0.995 * dt <= var <= 1.005 * dt
    assert abs(np.mean(p.increments)) < 4 * np.sqrt(dt / 1e6)


def test_coarsen_examples():
    p = generate_path(3, 1, 48, 2, 0.1)
    assert coarsen(p, 1) is p
    one = coarsen(p, 48)
    assert one.steps == 1 and one.dt == pytest.approx(4.8)
    assert np.allclose(one.increments[0], p.endpoint, atol=1e-13)
    with pytest.raises(GridMismatchError):
        coarsen(p, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**31 - 1))
def test_coarsen_associative_and_preserves_partial_sums(e, seed):
    steps = 2**e * 3
    p = generate_path(seed, 0, steps, 2, 1e-3)
    if e >= 2:
        assert np.array_equal(coarsen(coarsen(p, 2), 2).increments, coarsen(p, 4).increments)
    assert np.array_equal(coarsen(coarsen(p, 2**(e - 1)), 2).increments, coarsen(p, 2**e).increments)
    c = coarsen(p, 2)
    assert np.allclose(c.partial_sums(), p.partial_sums()[::2], atol=1e-14)


def test_nested_mass_grids_couple():
    # path used at m1 equals coarsening of the path at m2 = m1 / 4
    hbar, T = 0.01, 1.0
    m1, m2 = 0.125, 0.03125
    fine = generate_path(9, 0, int(round(T / (hbar * m2))), 1, hbar * m2)
    coarse = coarsen(fine, 4)
    assert coarse.dt == pytest.approx(hbar * m1)
    assert coarse.steps == int(round(T / (hbar * m1)))


def test_path_batch_and_block_sum():
    inc = path_batch(5, [0, 3], 8, 2, 0.1)
    assert inc.shape == (8, 2, 2)
    assert np.array_equal(inc[:, 1], generate_path(5, 3, 8, 2, 0.1).increments)
    per_path = np.moveaxis(inc, 0, 1)  # (paths, steps, k)
    summed = block_sum(per_path, 4)
    assert summed.shape == (2, 2, 2)
    assert np.allclose(summed[0, 1], inc[4:, 0].sum(axis=0))
    assert np.array_equal(block_sum(per_path, 2)[1], coarsen(generate_path(5, 3, 8, 2, 0.1), 2).increments)


def test_mass_family():
    assert mass_family(0.125, 3) == [0.125, 0.0625, 0.03125]
    with pytest.raises(ValueError):
        mass_family(1.0, 0)
