import json

import numpy as np
import pytest
from oracles import enumerate_nnls

from residuemap.basis import (BasisSet, SegmentData, backward_eliminate, build_basis, deduplicate,
                              default_delay_grid, fit_spline_residue, fit_step_residue, risk, step_design,
                              step_knots, tail_normalized)
from residuemap.residue import StepResidue, patlak_residue
from residuemap.timecore import TissueCurve, frame_integrate, model_frame_matrix, convolve


def region_curves(fdg, n):
    """Noise-free preset region curves at their own delays."""
    grid = np.unique(fdg.delays[:n])
    fm = model_frame_matrix(list(fdg.members), fdg.input, fdg.schedule, grid)
    idx = np.searchsorted(grid, fdg.delays[:n])
    return np.stack([fm.matrix[i] @ fdg.alphas[k] for k, i in enumerate(idx)])


def test_delay_grid_and_knots(fdg):
    g = default_delay_grid()
    assert g.size == 31 and g[0] == 0 and g[-1] == pytest.approx(1.0)
    k = step_knots(fdg.schedule)
    assert k[0] == 0 and k.size == 13 and k[-1] < fdg.schedule.t_end
    assert k[1] == pytest.approx(fdg.schedule.durations.min())


def test_step_design_columns_are_indicator_convolutions(fdg):
    knots = step_knots(fdg.schedule)
    X = step_design(fdg.input, fdg.schedule, knots, [0.1])
    ends = list(knots[1:]) + [None]
    for m in (0, 5, len(knots) - 1):
        if ends[m] is None:
            r = patlak_residue(fdg.schedule.t_end)
        else:
            r = StepResidue([0.0, ends[m]], [1.0, 0.0], fdg.schedule.t_end)
        ref = frame_integrate(convolve(r, fdg.input, 0.1), fdg.schedule)
        np.testing.assert_allclose(X[0, :, m], ref, rtol=1e-9, atol=1e-12 * ref.max())


def test_step_fit_recovers_noise_free_shape(fdg):
    sch = fdg.schedule
    truth = fdg.members[1].scaled(0.08)
    y = frame_integrate(convolve(truth, fdg.input, 0.2), sch)
    fit = fit_step_residue(TissueCurve(y, sch, np.maximum(y, 1e-6) * 1e-4), fdg.input)
    assert fit.delay == pytest.approx(0.2, abs=1e-9)
    assert fit.amplitude == pytest.approx(0.08, rel=1e-5)
    t = np.linspace(0, sch.t_end, 500)
    np.testing.assert_allclose(fit.residue(t), fdg.members[1](t), atol=1e-4)
    assert fit.residue.is_monotone()


def test_spline_fit_is_monotone(fdg):
    sch = fdg.schedule
    y = frame_integrate(convolve(fdg.members[1].scaled(0.08), fdg.input, 0.1), sch)
    rng = np.random.default_rng(0)
    y = y * (1 + 0.02 * rng.standard_normal(y.size))
    fit = fit_spline_residue(TissueCurve(y, sch, (0.02 * y) ** 2 + 1e-9), fdg.input)
    assert fit.residue.is_monotone()
    assert fit.residue.initial_value == pytest.approx(1.0)


def test_tail_normalization():
    r = StepResidue([0.0, 1.0, 5.0], [2.0, 1.0, 0.5], 60.0)
    n = tail_normalized(r)
    np.testing.assert_allclose(n.values, [1.0, 1 / 3, 0.0])
    assert tail_normalized(patlak_residue(60.0)) is None


def test_deduplicate_keeps_first_of_close_pairs():
    a = StepResidue([0.0, 1.0], [1.0, 0.0], 60.0)
    b = StepResidue([0.0, 1.0], [1.0, 0.01], 60.0)
    c = StepResidue([0.0, 5.0], [1.0, 0.0], 60.0)
    assert deduplicate([a, b, c], 0.02) == [0, 2]


def test_risk_matches_direct_formula(fdg):
    rng = np.random.default_rng(1)
    sch = fdg.schedule
    members = list(fdg.members)
    fm = model_frame_matrix(members, fdg.input, sch, [0.1, 0.2])
    X = fm.matrix[[0, 1, 1]]
    Y = np.stack([X[k] @ fdg.alphas[k] for k in range(3)])
    V = (0.02 * Y) ** 2 + 1e-8
    Y = Y + np.sqrt(V) * rng.standard_normal(Y.shape)
    seg = SegmentData(Y, V, np.array([0.1, 0.2, 0.2]), sch)
    cols = [0, 2]
    e = risk(seg, X, cols)
    w = 1.0 / V
    wrss = sum(enumerate_nnls(X[k][:, cols], Y[k], w[k])[1] for k in range(3))
    phi = np.maximum(1.0, V.sum(1) / Y.sum(1))
    dbar = (w * Y).mean(axis=1)
    assert e.wrss == pytest.approx(wrss, rel=1e-9)
    assert e.penalty == pytest.approx(2 * 2 * np.sum(phi * dbar))


def test_risk_with_delay_refit_never_exceeds_frozen(fdg):
    sch = fdg.schedule
    delays = default_delay_grid(0.4)
    fm = model_frame_matrix(list(fdg.members), fdg.input, sch, delays)
    y = fm.at(delays[4]) @ fdg.alphas[0]
    seg = SegmentData(y[None], (0.01 * y[None]) ** 2 + 1e-8, np.array([delays[2]]), sch)
    frozen = risk(seg, fm.matrix[[2]])
    free = risk(seg, fm)
    assert free.wrss <= frozen.wrss + 1e-9


def test_backward_elimination_removes_spurious_member(fdg):
    sch = fdg.schedule
    spurious = StepResidue(step_knots(sch)[:4], [1.0, 1.0, 1.0, 0.0], sch.t_end)
    cands = [fdg.members[0], spurious, fdg.members[1]]
    Y = 1e5 * region_curves(fdg, 5)  # count units, variance = mean
    rng = np.random.default_rng(7)
    V = Y.copy()
    Y = Y + np.sqrt(V) * rng.standard_normal(Y.shape)
    seg = SegmentData(Y, V, fdg.delays[:5], sch)
    basis, trace = backward_eliminate(cands, seg, fdg.input, ["vasc", "spur", "dist"])
    assert basis.names == ["vasc", "dist", "patlak"]
    assert trace.risks[trace.best] == trace.risks.min()
    assert trace.J[0] == 4 and trace.J[-1] == 1


def test_build_basis_end_to_end(fdg):
    sch = fdg.schedule
    Y = region_curves(fdg, 10)
    V = 1e-5 * np.abs(Y) + 1e-10
    basis, fits = build_basis(Y, V, fdg.input, sch)
    assert basis.names[-1] == "patlak"
    assert len(fits) == 10
    np.testing.assert_allclose([f.delay for f in fits], np.round(fdg.delays * 30) / 30, atol=1e-9)
    back = BasisSet.from_dict(json.loads(basis.to_json()))
    assert back.names == basis.names
    t = np.linspace(0, sch.t_end, 300)
    for a, b in zip(back.members, basis.members):
        np.testing.assert_allclose(a(t), b(t))


def test_basis_requires_patlak_last_and_unit_members():
    te = 60.0
    with pytest.raises(ValueError):
        BasisSet([patlak_residue(te), StepResidue([0, 1], [1, 0], te)], ["patlak", "a"], [0, 1])
    with pytest.raises(ValueError):
        BasisSet([StepResidue([0, 1], [2, 0], te), patlak_residue(te)], ["a", "patlak"], [0, 1])
