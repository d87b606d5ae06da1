import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndtwin.bsloc import (TAConfig, TAObservation, _cost, estimate_bs, grid_search, quantize_distance,
                          read_observations, ta_granularity, write_observations)
from ndtwin.errors import (DegenerateGeometry, InsufficientObservations, InvariantViolation, OutOfRange,
                           UnsupportedNumerology)

TABLE_I = {0: 78.125, 1: 39.063, 2: 19.531, 3: 9.766, 4: 4.883}


def circle_obs(bs, radius=10.0, n=20, mu=4, z=0.5, quantized=True, config=None):
    cfg = config or TAConfig(mu)
    obs, exact = [], []
    for k in range(n):
        a = 2 * math.pi * k / n
        p = (bs[0] + radius * math.cos(a), bs[1] + radius * math.sin(a), z)
        d = math.dist(p, bs)
        exact.append(d)
        obs.append(TAObservation(p, quantize_distance(d, mu, cfg) if quantized else 0, cfg))
    return obs, np.array(exact)


@pytest.mark.parametrize("mu", range(5))
def test_table_values(mu):
    assert ta_granularity(mu) == pytest.approx(TABLE_I[mu], abs=1e-3)


@pytest.mark.parametrize("mu", range(4))
def test_halving_law(mu):
    assert ta_granularity(mu + 1) == ta_granularity(mu) / 2


def test_round_trip_interpretation():
    # one TA step of round-trip time at mu = 0, converted to a one-way range
    rtt = 16 * 64 * (1 / (480e3 * 4096))
    assert ta_granularity(0) == pytest.approx(rtt * 3e8 / 2, abs=1e-12)


@pytest.mark.parametrize("mu", [-1, 5, 7])
def test_unsupported_numerology(mu):
    with pytest.raises(UnsupportedNumerology):
        ta_granularity(mu)
    with pytest.raises(UnsupportedNumerology):
        TAConfig(mu)


def test_quantize_examples():
    assert quantize_distance(0.0, 4) == 0
    assert quantize_distance(10.0, 4) == 2
    g = ta_granularity(4)
    assert quantize_distance(2.5 * g, 4) == 3  # ties round up
    with pytest.raises(InvariantViolation):
        quantize_distance(-1.0, 4)


def test_quantize_range_limit():
    # 272 297 m exceeds n_max steps only when the exact speed of light is used
    exact = TAConfig(0, c=299_792_458.0)
    with pytest.raises(OutOfRange):
        quantize_distance(272_297.0, 0, exact)
    assert quantize_distance(272_297.0, 0) == 3485
    with pytest.raises(OutOfRange):
        quantize_distance(3486.6 * ta_granularity(0), 0)


@given(st.floats(0, 17_000), st.integers(0, 4))
def test_quantization_bound(d, mu):
    g = ta_granularity(mu)
    if d / g + 0.5 > 3486:
        return
    assert abs(quantize_distance(d, mu) * g - d) <= g / 2 + 1e-9


def test_observation_range_check():
    with pytest.raises(OutOfRange):
        TAObservation((0, 0, 0), 3487)
    assert TAObservation((0, 0, 0), 3, TAConfig(2)).range == pytest.approx(3 * ta_granularity(2))


def test_quantized_circle_recovers_bs():
    bs = (37.0, -12.0, 2.0)
    obs, _ = circle_obs(bs)
    est = estimate_bs(obs, known_height=2.0)
    assert math.dist(est.position[:2], bs[:2]) <= 2 * ta_granularity(4)
    assert est.position[2] == 2.0 and est.residual >= 0


def test_exact_ranges_recover_bs():
    rng = np.random.default_rng(0)
    for _ in range(5):
        bs = (*rng.uniform(-50, 50, 2), 2.0)
        pts = rng.uniform(-30, 30, size=(6, 3)) + [bs[0], bs[1], 0]
        pts[:, 2] = rng.uniform(0, 1.5, 6)
        r = np.array([math.dist(p, bs) for p in pts])
        obs = [TAObservation(tuple(p), 0) for p in pts]
        est = estimate_bs(obs, 2.0, ranges=r)
        assert math.dist(est.position, bs) <= 1e-6
        assert est.residual <= 1e-6


def test_refinement_never_worse_than_grid():
    bs = (5.0, 8.0, 2.0)
    obs, _ = circle_obs(bs, radius=25.0, n=12, mu=3)
    p = np.array([o.robot_position for o in obs])
    r = np.array([o.range for o in obs])
    g = ta_granularity(3)
    b0 = grid_search(p, r, 2.0, g / 2, r.max() + g)
    est = estimate_bs(obs, 2.0)
    assert est.residual ** 2 * len(obs) <= float(_cost(b0, p, r, 2.0)) + 1e-12


def test_translation_equivariance():
    bs = (3.0, 4.0, 2.0)
    obs, exact = circle_obs(bs, quantized=False, n=8)
    t = np.array([12.5, -7.25])
    moved = [TAObservation((o.robot_position[0] + t[0], o.robot_position[1] + t[1], o.robot_position[2]), 0)
             for o in obs]
    a = estimate_bs(obs, 2.0, ranges=exact)
    b = estimate_bs(moved, 2.0, ranges=exact)
    np.testing.assert_allclose(np.array(b.position[:2]) - a.position[:2], t, atol=1e-6)


def test_estimator_errors():
    obs, _ = circle_obs((0, 0, 2), n=2)
    with pytest.raises(InsufficientObservations):
        estimate_bs(obs, 2.0)
    line = [TAObservation((float(k), 2.0 * k, 0.0), 1) for k in range(5)]
    with pytest.raises(DegenerateGeometry):
        estimate_bs(line, 2.0)
    mixed = circle_obs((0, 0, 2), n=3, mu=4)[0] + circle_obs((0, 0, 2), n=3, mu=3)[0]
    with pytest.raises(InvariantViolation):
        estimate_bs(mixed, 2.0)


def test_observation_csv_roundtrip():
    obs, _ = circle_obs((1, 2, 2), n=5)
    text = write_observations(obs)
    assert read_observations(text) == obs
    with pytest.raises(InvariantViolation):
        read_observations("x,y,z,n,mu\n1,2,3,four,4\n")
