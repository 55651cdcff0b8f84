"""Static network model: reduction, power evaluation and equilibria."""
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcgrid.errors import DimensionMismatch, EmptyGeneratorSet, NoConvergence, SingularInterior
from flcgrid.grid import (
    FullNetwork,
    GeneratorParams,
    Line,
    ReducedNetwork,
    accelerating_power,
    electrical_power,
    kron_reduce,
    manufacture_equilibrium,
    solve_equilibrium,
)

from conftest import random_network


def pe_oracle(delta, G, B, E):
    n = len(delta)
    out = []
    for i in range(n):
        s = 0.0
        for k in range(n):
            d = delta[i] - delta[k]
            s += E[i] * E[k] * (G[i][k] * math.cos(d) + B[i][k] * math.sin(d))
        out.append(s)
    return np.array(out)


def two_gen():
    return ReducedNetwork([[0.1, 0.05], [0.05, 0.1]], [[0.0, 0.5], [0.5, 0.0]])


# -- parameters ----------------------------------------------------------------

def test_params_broadcast_and_defaults():
    p = GeneratorParams.build(M=1.0, D=0.1, Pm=[0.2, 0.3], E=1.0)
    assert p.n == 2
    np.testing.assert_array_equal(p.M, [1.0, 1.0])
    np.testing.assert_array_equal(p.alpha, [0.5, 0.5])
    np.testing.assert_array_equal(p.beta, [0.005, 0.005])
    np.testing.assert_array_equal(p.delta_star, [0.0, 0.0])


@pytest.mark.parametrize("field,value", [("M", 0.0), ("E", -1.0), ("D", -0.1), ("alpha", -1.0), ("beta", -1e-3)])
def test_params_reject_out_of_domain(field, value):
    kw = dict(M=1.0, D=0.0, Pm=[0.0, 0.0], E=1.0)
    kw[field] = value
    with pytest.raises(ValueError):
        GeneratorParams.build(**kw)


# -- reduced network -------------------------------------------------------------

def test_reduced_requires_exact_symmetry():
    with pytest.raises(ValueError):
        ReducedNetwork([[1.0, 0.5], [0.5 + 1e-15, 1.0]], np.zeros((2, 2)))


def test_reduced_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        ReducedNetwork(np.zeros((2, 2)), np.zeros((3, 3)))


def test_negative_off_diagonal_warns_not_raises(caplog):
    with caplog.at_level(logging.WARNING, logger="flcgrid.grid"):
        net = ReducedNetwork([[5.0, -5.0], [-5.0, 5.0]], np.zeros((2, 2)))
    assert net.n == 2
    assert "negative off-diagonal" in caplog.text


# -- Kron reduction --------------------------------------------------------------

def test_tri_bus_reduction(tri_bus):
    np.testing.assert_array_equal(tri_bus.y_real, [[10, 0, -10], [0, 10, -10], [-10, -10, 20]])
    red = kron_reduce(tri_bus)
    np.testing.assert_allclose(red.G, [[5, -5], [-5, 5]], atol=1e-12)
    np.testing.assert_allclose(red.B, np.zeros((2, 2)), atol=1e-12)


def test_nothing_to_eliminate_returns_y():
    full = FullNetwork.from_lines(3, [Line(0, 1, 1.0, -4.0), Line(1, 2, 0.5, -2.0)], (0, 1, 2))
    red = kron_reduce(full)
    np.testing.assert_array_equal(red.G, full.y_real)
    np.testing.assert_array_equal(red.B, full.y_imag)
    # idempotent once nothing is left to eliminate
    again = kron_reduce(FullNetwork(red.G, red.B, (0, 1, 2)))
    np.testing.assert_array_equal(again.G, red.G)
    np.testing.assert_array_equal(again.B, red.B)


def test_empty_generator_set():
    with pytest.raises(EmptyGeneratorSet):
        FullNetwork(np.eye(2), np.zeros((2, 2)), ())


def test_singular_interior():
    # bus 2 is isolated with no shunt: its diagonal entry is zero
    full = FullNetwork.from_lines(3, [Line(0, 1, 1.0, -5.0)], (0, 1))
    with pytest.raises(SingularInterior):
        kron_reduce(full)


def _boundary_check(full, rng):
    red = kron_reduce(full)
    gens = list(full.gen_buses)
    Y = full.Y
    I = np.zeros(full.n_bus, dtype=complex)
    I[gens] = rng.normal(size=len(gens)) + 1j * rng.normal(size=len(gens))
    v_full = np.linalg.solve(Y, I)[gens]
    v_red = np.linalg.solve(red.G + 1j * red.B, I[gens])
    return np.max(np.abs(v_full - v_red))


def test_six_bus_boundary_equivalence():
    rng = np.random.default_rng(6)
    full = random_network(rng, 6, 3)
    for _ in range(5):
        assert _boundary_check(full, rng) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_bus=st.integers(2, 12), data=st.data())
def test_boundary_equivalence_property(seed, n_bus, data):
    n_gen = data.draw(st.integers(1, n_bus))
    rng = np.random.default_rng(seed)
    full = random_network(rng, n_bus, n_gen)
    assert _boundary_check(full, rng) < 1e-9


def test_reduction_is_exactly_symmetric():
    rng = np.random.default_rng(11)
    red = kron_reduce(random_network(rng, 10, 4))
    assert np.array_equal(red.G, red.G.T) and np.array_equal(red.B, red.B.T)


def test_without_line_and_bus(tri_bus):
    cut = tri_bus.without_line(2, 0)  # order-insensitive
    np.testing.assert_array_equal(cut.y_real, [[0, 0, 0], [0, 10, -10], [0, -10, 10]])
    assert len(cut.lines) == 1
    grounded = tri_bus.without_bus(2)
    assert grounded.n_bus == 2 and grounded.lines == ()
    with pytest.raises(ValueError):
        tri_bus.without_bus(0)
    with pytest.raises(KeyError):
        tri_bus.without_line(0, 1)


# -- power -------------------------------------------------------------------------

def test_pe_zero_for_lossless_flat():
    net = ReducedNetwork(np.zeros((3, 3)), [[0, 1, 2], [1, 0, 3], [2, 3, 0]])
    np.testing.assert_array_equal(electrical_power(np.full(3, 0.4), net, np.ones(3)), np.zeros(3))


def test_pe_hand_value():
    pe = electrical_power([0.1, 0.0], two_gen(), [1.0, 1.0])
    assert pe[0] == pytest.approx(0.1996669, abs=1e-6)
    assert pe[0] == pytest.approx(0.1 + 0.05 * math.cos(0.1) + 0.5 * math.sin(0.1), abs=1e-15)


def test_pa_hand_value():
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[0.3, 0.3], E=1.0)
    pa = accelerating_power([0.1, 0.0], params, two_gen())
    assert pa[0] == pytest.approx(0.1003331, abs=1e-6)


def test_pa_zero_with_no_drive_and_equal_angles():
    net = ReducedNetwork(np.zeros((2, 2)), [[0, 1], [1, 0]])
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[0.0, 0.0], E=1.0)
    np.testing.assert_array_equal(accelerating_power([0.7, 0.7], params, net), np.zeros(2))


def test_pe_against_double_loop_oracle():
    rng = np.random.default_rng(4)
    A = rng.uniform(0, 1, (4, 4))
    C = rng.uniform(0, 3, (4, 4))
    net = ReducedNetwork(A + A.T, C + C.T)
    delta, E = rng.uniform(-1, 1, 4), rng.uniform(0.9, 1.1, 4)
    np.testing.assert_allclose(electrical_power(delta, net, E), pe_oracle(delta, net.G, net.B, E), atol=1e-12)


def test_pe_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        electrical_power([0.0, 0.0, 0.0], two_gen(), [1.0, 1.0])
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[0.0, 0.0, 0.0], E=1.0)
    with pytest.raises(DimensionMismatch):
        accelerating_power([0.0, 0.0], params, two_gen())


@settings(max_examples=50)
@given(st.lists(st.integers(-64, 64), min_size=3, max_size=3), st.integers(-32, 32))
def test_pe_shift_invariance_exact_on_dyadic_angles(raw, shift):
    # dyadic angles keep every difference exact, so the invariance is bitwise
    rng = np.random.default_rng(0)
    A = rng.uniform(0, 1, (3, 3))
    net = ReducedNetwork(A + A.T, 2 * (A + A.T))
    delta = np.array(raw) / 64.0
    E = np.array([1.0, 1.05, 0.95])
    assert np.array_equal(electrical_power(delta + shift / 16.0, net, E), electrical_power(delta, net, E))


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_pe_shift_invariance_general(seed, c):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 1, (4, 4))
    net = ReducedNetwork(A + A.T, A + A.T)
    delta, E = rng.uniform(-1, 1, 4), rng.uniform(0.9, 1.1, 4)
    np.testing.assert_allclose(electrical_power(delta + c, net, E), electrical_power(delta, net, E), atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_lossless_power_sums_to_zero(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 2, (5, 5))
    net = ReducedNetwork(np.zeros((5, 5)), A + A.T)
    pe = electrical_power(rng.uniform(-2, 2, 5), net, rng.uniform(0.8, 1.2, 5))
    assert abs(pe.sum()) < 1e-12


# -- equilibria ----------------------------------------------------------------------

def test_equilibrium_lossless_zero_injection():
    net = ReducedNetwork(np.zeros((3, 3)), [[-3, 1, 2], [1, -4, 3], [2, 3, -5]])
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[0.0, 0.0, 0.0], E=1.0)
    np.testing.assert_array_equal(solve_equilibrium(params, net), np.zeros(3))


def test_equilibrium_two_gen_closed_form():
    b, p = 1.5, 0.4
    net = ReducedNetwork(np.zeros((2, 2)), [[-b, b], [b, -b]])
    E = np.array([1.1, 0.95])
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[p, -p], E=E)
    delta = solve_equilibrium(params, net)
    assert delta[1] == 0.0
    assert E[0] * E[1] * b * math.sin(delta[0]) == pytest.approx(p, abs=1e-10)
    assert delta[0] == pytest.approx(math.asin(p / (E[0] * E[1] * b)), abs=1e-10)


def test_manufacture_flat_start():
    A = np.array([[2.0, 0.5, 0.25], [0.5, 1.0, 0.75], [0.25, 0.75, 3.0]])
    E = np.array([1.0, 1.1, 0.9])
    net = ReducedNetwork(A, np.zeros((3, 3)))
    np.testing.assert_array_equal(manufacture_equilibrium(np.zeros(3), E, ReducedNetwork(np.zeros((3, 3)), A)),
                                  np.zeros(3))
    np.testing.assert_allclose(manufacture_equilibrium(np.zeros(3), E, net), (E[:, None] * E[None, :] * A).sum(1),
                               atol=1e-15)


def test_manufactured_angles_are_exact_equilibrium(desk3):
    pa = accelerating_power(desk3.delta0, desk3.params, desk3.reduced)
    assert np.max(np.abs(pa)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_manufacture_solve_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    G = rng.uniform(0, 0.3, (n, n))
    B = rng.uniform(0.5, 3.0, (n, n))
    net = ReducedNetwork(G + G.T, B + B.T)
    E = rng.uniform(0.95, 1.1, n)
    delta0 = rng.uniform(-0.3, 0.3, n)
    delta0 -= delta0[-1]
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=manufacture_equilibrium(delta0, E, net), E=E)
    np.testing.assert_allclose(solve_equilibrium(params, net), delta0, atol=1e-8)


def test_no_convergence_reports_residual():
    # demand beyond the transfer limit has no equilibrium
    net = ReducedNetwork(np.zeros((2, 2)), [[-1.0, 1.0], [1.0, -1.0]])
    params = GeneratorParams.build(M=1.0, D=0.0, Pm=[3.0, -3.0], E=1.0)
    with pytest.raises(NoConvergence) as info:
        solve_equilibrium(params, net)
    assert info.value.residual > 1.0
