import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from residuemap.residue import (CompartmentParams, ExponentialResidue, MixtureResidue, SplineResidue,
                                StepResidue, compartment_residue, concentration_components, decompose,
                                kinetic_summary, mixture_residue, patlak_residue, residue_from_dict)
from residuemap.timecore import InputFunction, convolve

T_E = 60.0


@st.composite
def step_residues(draw):
    n = draw(st.integers(1, 8))
    gaps = draw(st.lists(st.floats(0.05, 10.0), min_size=n - 1, max_size=n - 1))
    drops = draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n))
    knots = np.concatenate([[0.0], np.cumsum(gaps)])
    values = np.cumsum(drops[::-1])[::-1]
    return StepResidue(knots, values, T_E)


def test_step_residue_validation():
    with pytest.raises(ValueError):
        StepResidue([0.5, 1.0], [1.0, 0.5], T_E)
    with pytest.raises(ValueError):
        StepResidue([0.0, 0.0], [1.0, 0.5], T_E)
    with pytest.raises(ValueError):
        StepResidue([0.0], [1.0], 0.0)


@given(step_residues(), st.floats(0.0, 50.0), st.floats(0.0, 20.0))
def test_step_integral_matches_quadrature(r, a, width):
    b = a + width
    ref, _ = quad(lambda t: float(r(np.array(t))), a, b, points=r.knots[(r.knots > a) & (r.knots < b)],
                  limit=200)
    assert r.integral(a, b) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=3),
       st.lists(st.floats(0.0, 3.0), min_size=3, max_size=3), st.floats(0.0, 40.0))
def test_exponential_integral(amps, rates, b):
    rates = rates[:len(amps)]
    r = ExponentialResidue(amps, rates, T_E)
    ref, _ = quad(lambda t: float(r(np.array(t))), 0.0, b)
    assert r.integral(0.0, b) == pytest.approx(ref, rel=1e-9, abs=1e-10)


@given(step_residues(), st.floats(0.05, 30.0))
def test_decomposition_adds_up(r, tau):
    parts = decompose(r, tau)
    t = np.linspace(0, T_E, 997)
    total = parts.vascular(t) + parts.distribution(t) + parts.retained(t)
    assert np.max(np.abs(total - r(t))) < 1e-12
    for p in (parts.vascular, parts.distribution, parts.retained):
        assert p.is_monotone()


@given(step_residues(), st.floats(0.05, 30.0))
def test_summary_is_component_maxima_and_integrals(r, tau):
    ks = kinetic_summary(r, tau)
    parts = decompose(r, tau)
    assert ks.K_B == pytest.approx(parts.vascular.initial_value, abs=1e-12)
    assert ks.K_D == pytest.approx(parts.distribution.initial_value, abs=1e-12)
    assert ks.K_i == pytest.approx(parts.retained.initial_value, abs=1e-12)
    assert ks.V_B == pytest.approx(parts.vascular.integral(0, T_E), abs=1e-9)
    assert ks.V_D == pytest.approx(parts.distribution.integral(0, T_E), abs=1e-9)
    r0 = r.initial_value
    if r0 > 0:
        assert ks.zeta == r(np.array([T_E]))[0] / r0


def test_summary_requires_tau_inside_window():
    with pytest.raises(ValueError):
        kinetic_summary(patlak_residue(T_E), 0.0)
    with pytest.raises(ValueError):
        kinetic_summary(patlak_residue(T_E), T_E)


def test_one_compartment_limits():
    # K_D -> K1 exp(-k2 tau) ~ K1, V_D -> K1/k2 for long windows
    r = compartment_residue(CompartmentParams("1c", 0.2, 0.5), 400.0)
    ks = kinetic_summary(r, 1e-6)
    assert ks.K_D == pytest.approx(0.2, abs=1e-6)
    assert ks.V_D == pytest.approx(0.4, abs=1e-5)
    assert ks.K_i == pytest.approx(0.0, abs=1e-12)


def test_compartment_params_validation():
    with pytest.raises(ValueError):
        CompartmentParams("3c", 0.1, 0.1)
    with pytest.raises(ValueError):
        CompartmentParams("1c", 0.1, 0.1, 0.1)
    with pytest.raises(ValueError):
        CompartmentParams("2c", -0.1, 0.1, 0.1)


def test_concentration_components_sum_to_full_curve():
    inp = InputFunction([0, 0.3, 1, 3, 10, 60], [0, 4, 2, 1, 0.5, 0.2])
    r = compartment_residue(CompartmentParams("2c", 0.1, 0.2, 0.05), T_E)
    cv, cd, cx = concentration_components(r, inp, 1.0, step=1 / 600)
    full = convolve(r, inp, step=1 / 600)
    t = np.linspace(0, 55, 40)
    np.testing.assert_allclose(cv(t) + cd(t) + cx(t), full(t), atol=1e-3 * full(t).max())


def test_mixture_of_steps_collapses_to_step():
    a = StepResidue([0.0, 1.0], [1.0, 0.0], T_E)
    b = patlak_residue(T_E)
    m = mixture_residue([0.5, 0.2], [a, b])
    assert isinstance(m, StepResidue)
    t = np.linspace(0, T_E, 101)
    np.testing.assert_allclose(m(t), 0.5 * a(t) + 0.2 * b(t))
    with pytest.raises(ValueError):
        mixture_residue([-0.1, 0.2], [a, b])


def test_spline_order_one_is_a_step():
    s = SplineResidue([0.0, 1.0, 3.0, T_E], [1.0, 0.5, 0.2], 1, T_E)
    st_ = StepResidue([0.0, 1.0, 3.0], [1.0, 0.5, 0.2], T_E)
    t = np.linspace(0, T_E - 1e-9, 300)
    np.testing.assert_allclose(s(t), st_(t))
    assert s.integral(0, 10) == pytest.approx(st_.integral(0, 10))


@pytest.mark.parametrize("r", [
    StepResidue([0.0, 2.0], [1.0, 0.3], T_E),
    ExponentialResidue([0.5, 0.1], [1.0, 0.0], T_E),
    MixtureResidue([patlak_residue(T_E), ExponentialResidue([1.0], [0.2], T_E)], [0.3, 0.7]),
    SplineResidue([0, 0, 0, 5, T_E, T_E, T_E], [1.0, 0.6, 0.4, 0.2], 3, T_E),
])
def test_json_round_trip(r):
    d = json.loads(json.dumps(r.to_dict()))
    back = residue_from_dict(d)
    t = np.linspace(0, T_E, 77)
    np.testing.assert_allclose(back(t), r(t), rtol=1e-15)


def test_unit_normalization_flag():
    assert patlak_residue(T_E).to_dict()["normalization"] == "unit"
    assert patlak_residue(T_E, 0.3).to_dict()["normalization"] == "scaled"
