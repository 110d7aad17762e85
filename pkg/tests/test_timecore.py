import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from residuemap.residue import ExponentialResidue, StepResidue, patlak_residue
from residuemap.timecore import (FrameModel, FrameSchedule, InputFunction, TissueCurve, convolve,
                                 exp_convolution_frames, frame_integrate, model_frame_matrix,
                                 shifted_cumulative_frames)


def small_input():
    t = np.array([0.0, 0.2, 0.5, 1.0, 2.0, 4.0, 10.0])
    v = np.array([0.0, 3.0, 1.5, 1.0, 0.6, 0.4, 0.2])
    return InputFunction(t, v)


def small_schedule(decay=0.0):
    return FrameSchedule.from_durations([0.25] * 4 + [0.5] * 4 + [2.0] * 3, decay=decay)


piecewise_inputs = st.lists(
    st.tuples(st.floats(0.01, 2.0), st.floats(0.0, 5.0)), min_size=2, max_size=8
).map(lambda pts: InputFunction(np.cumsum([p[0] for p in pts]), [p[1] for p in pts]))


# --------------------------------------------------------------------------- schedules


def test_schedule_rejects_overlap_and_empty_frames():
    with pytest.raises(ValueError):
        FrameSchedule([0.0, 0.5], [1.0, 2.0])
    with pytest.raises(ValueError):
        FrameSchedule([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        FrameSchedule([-1.0], [1.0])
    with pytest.raises(ValueError):
        FrameSchedule([0.0], [1.0], decay=-0.1)


def test_from_durations_edges():
    s = FrameSchedule.from_durations([1.0, 0.5, 2.0], start=0.5)
    np.testing.assert_allclose(s.starts, [0.5, 1.5, 2.0])
    np.testing.assert_allclose(s.ends, [1.5, 2.0, 4.0])
    assert s.t_end == 4.0 and s.n_frames == 3


def test_quadrature_exact_for_quintic():
    s = small_schedule()
    nodes, w, off = s.quadrature()
    vals = np.add.reduceat(w * nodes**5, off)
    exact = (s.ends**6 - s.starts**6) / 6
    np.testing.assert_allclose(vals, exact, rtol=1e-12)


def test_quadrature_carries_decay():
    lam = 0.3
    s = small_schedule(lam)
    vals = frame_integrate(lambda t: np.ones_like(t), s)
    exact = (np.exp(-lam * s.starts) - np.exp(-lam * s.ends)) / lam
    np.testing.assert_allclose(vals, exact, rtol=1e-9)


# --------------------------------------------------------------------------- input


@given(piecewise_inputs, st.floats(0.0, 20.0))
def test_cumulative_matches_quadrature(inp, t):
    ref, _ = quad(lambda s: float(inp(np.array(s))), 0.0, t, points=inp.times[inp.times < t][:50],
                  limit=200)
    assert inp.cumulative(np.array(t)) == pytest.approx(ref, rel=1e-7, abs=1e-9)


@given(piecewise_inputs, st.floats(0.0, 3.0), st.floats(0.1, 15.0))
def test_exp_convolution_matches_quadrature(inp, k, t):
    ref, _ = quad(lambda s: np.exp(-k * (t - s)) * float(inp(np.array(s))), 0.0, t,
                  points=inp.times[inp.times < t][:50], limit=200)
    got = inp.exp_convolution([k], np.array([t]))[0, 0]
    assert got == pytest.approx(ref, rel=1e-7, abs=1e-9)


def test_input_zero_before_first_sample_and_holds_after():
    inp = InputFunction([1.0, 2.0], [2.0, 4.0])
    assert inp(np.array(0.5)) == 0.0
    assert inp(np.array(5.0)) == 4.0
    assert inp.normalized().kappa == 1.0


def test_negative_input_is_clamped_with_warning():
    with pytest.warns(UserWarning):
        inp = InputFunction([0.0, 1.0], [-1.0, 1.0])
    assert np.all(inp.values >= 0)


# --------------------------------------------------------------------------- convolution


def test_constant_residue_gives_cumulative_input():
    inp = small_input()
    c = convolve(patlak_residue(10.0), inp)
    t = np.linspace(0, 9, 50)
    np.testing.assert_allclose(c(t), inp.cumulative(t), rtol=1e-12, atol=1e-14)


def test_delay_shifts_the_curve():
    inp = small_input()
    r = ExponentialResidue([1.0], [0.7], 10.0)
    t = np.linspace(0, 9, 40)
    np.testing.assert_allclose(convolve(r, inp, 0.3)(t), convolve(r, inp)(t - 0.3), atol=1e-14)


def test_exact_and_grid_paths_agree():
    inp = small_input()
    r = StepResidue([0.0, 0.5, 2.0], [1.0, 0.6, 0.2], 10.0)
    t = np.linspace(0, 9, 30)
    exact = convolve(r, inp)(t)
    grid = convolve(r, inp, method="grid", step=1 / 240)(t)
    np.testing.assert_allclose(grid, exact, atol=2e-3 * exact.max())


def test_convolve_rejects_short_residue():
    with pytest.raises(ValueError):
        convolve(patlak_residue(1.0), small_input(), t_end=2.0)


# --------------------------------------------------------------------------- frame models


def test_model_frame_matrix_is_linear_in_members():
    inp, s = small_input(), small_schedule(0.05)
    a = StepResidue([0.0, 1.0], [1.0, 0.3], s.t_end)
    b = ExponentialResidue([1.0], [0.5], s.t_end)
    fm = model_frame_matrix([a, b], inp, s, [0.0, 0.1])
    mix = model_frame_matrix([ExponentialResidue([1.0], [0.5], s.t_end)], inp, s, [0.0, 0.1])
    np.testing.assert_allclose(fm.matrix[:, :, 1], mix.matrix[:, :, 0], rtol=1e-12)
    direct = frame_integrate(convolve(a, inp, 0.1), s)
    np.testing.assert_allclose(fm.matrix[1, :, 0], direct, rtol=1e-10)


def test_exp_convolution_frames_match_frame_model():
    inp, s = small_input(), small_schedule(0.05)
    rates, delays = np.array([0.1, 1.0, 4.0]), np.array([0.0, 0.2])
    E = exp_convolution_frames(inp, s, rates, delays)
    for i, k in enumerate(rates):
        fm = model_frame_matrix([ExponentialResidue([1.0], [k], s.t_end)], inp, s, delays)
        np.testing.assert_allclose(E[:, i, :], fm.matrix[:, :, 0].T, rtol=1e-12, atol=1e-15)


def test_shifted_cumulative_frames_chunking():
    inp, s = small_input(), small_schedule()
    shifts = np.linspace(0, 1, 70)
    np.testing.assert_allclose(shifted_cumulative_frames(inp, s, shifts, chunk=7),
                               shifted_cumulative_frames(inp, s, shifts), rtol=1e-14)


def test_frame_model_at_requires_grid_delay():
    fm = FrameModel(np.array([0.0, 0.5]), np.zeros((2, 3, 1)))
    assert fm.at(0.5).shape == (3, 1)
    with pytest.raises(KeyError):
        fm.at(0.25)


def test_delay_grid_validation():
    with pytest.raises(ValueError):
        model_frame_matrix([patlak_residue(10.0)], small_input(), small_schedule(), [0.2, 0.1])


def test_tissue_curve_checks_length():
    with pytest.raises(ValueError):
        TissueCurve(np.ones(3), small_schedule())
