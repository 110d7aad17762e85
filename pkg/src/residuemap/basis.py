"""Segment-level nonparametric residue fits, the unbiased-risk statistic and
backward elimination to a basis set.

Step residues use the increment parameterization

    R(t) = sum_m c_m 1{t < kappa_{m+1}},   c_m >= 0,   kappa_{M+1} = inf,

which is nonnegative and nonincreasing for any feasible ``c`` and whose
convolution with the input is ``sum_m c_m [CumCp(t) - CumCp(t - kappa_{m+1})]``
(the last column is just ``CumCp``). The amplitude ``R(0) = sum c`` is
reported separately from the unit-normalized shape.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nnls import fit_batch, wnnls
from .residue import Residue, SplineResidue, StepResidue, patlak_residue, residue_from_dict
from .timecore import (FrameModel, FrameSchedule, InputFunction, TissueCurve, model_frame_matrix,
                       shifted_cumulative_frames)

N_KNOTS = 12
DEDUP_DISTANCE = 0.02
PATLAK = "patlak"
VARIANCE_FLOOR = 1e-9


def default_delay_grid(max_delay: float = 1.0, step: float = 2.0 / 60.0) -> np.ndarray:
    """0 to ``max_delay`` minutes in ``step`` increments (default 0..60 s by 2 s)."""
    n = int(round(max_delay / step))
    return np.arange(n + 1) * step


def step_knots(schedule: FrameSchedule, n: int = N_KNOTS) -> np.ndarray:
    """0 followed by ``n`` geometrically spaced knots from the shortest frame up to (not including) T_e."""
    lo = float(schedule.durations.min())
    hi = schedule.t_end
    if not lo < hi:
        raise ValueError("schedule too short for a knot grid")
    return np.concatenate([[0.0], np.geomspace(lo, hi, n + 1)[:-1]])


def step_design(input: InputFunction, schedule: FrameSchedule, knots, delays) -> np.ndarray:
    """Frame-integrated increment columns for every delay; shape (D, B, M+1)."""
    knots = np.asarray(knots, dtype=float)
    delays = np.asarray(delays, dtype=float)
    ends = np.concatenate([knots[1:], [np.inf]])
    shifts = np.concatenate([[0.0], knots[1:]])
    all_shifts = (delays[:, None] + shifts[None, :]).ravel()
    g = shifted_cumulative_frames(input, schedule, all_shifts)
    g = g.reshape(schedule.n_frames, delays.size, shifts.size)
    out = np.empty((delays.size, schedule.n_frames, ends.size))
    for m in range(ends.size):
        if np.isinf(ends[m]):
            out[:, :, m] = g[:, :, 0].T
        else:
            out[:, :, m] = (g[:, :, 0] - g[:, :, m + 1]).T
    return out


@dataclass
class SegmentFit:
    residue: Residue
    amplitude: float
    delay: float
    wrss: float
    coef: np.ndarray


def _step_from_increments(knots, c, t_end):
    values = np.cumsum(c[::-1])[::-1]
    return StepResidue(knots, values, t_end)


def fit_step_residue(curve: TissueCurve, input: InputFunction, knots=None, delays=None,
                     design: np.ndarray | None = None) -> SegmentFit:
    """Nonnegative nonincreasing step residue by weighted NNLS and delay grid search.

    Weights are ``1 / variance`` of the curve. The returned residue is
    normalized to ``R(0) = 1``; ``amplitude`` carries the scale.
    """
    sch = curve.schedule
    knots = step_knots(sch) if knots is None else np.asarray(knots, dtype=float)
    delays = default_delay_grid() if delays is None else np.asarray(delays, dtype=float)
    X = step_design(input, sch, knots, delays) if design is None else design
    w = curve.weights()
    fit = fit_batch(curve.values[None, :], FrameModel(delays, X), weights0=w[None, :], max_iter=1)
    c = fit.coef[0]
    amp = float(c.sum())
    if amp <= 0:
        res = patlak_residue(sch.t_end, 1.0)
    else:
        res = _step_from_increments(knots, c / amp, sch.t_end)
    return SegmentFit(res, amp, float(fit.delay[0]), float(fit.wrss[0]), c)


def _spline_columns(knots, order, t_end):
    """Cumulative B-spline columns: column j has coefficients 1 for i <= j."""
    inner = np.asarray(knots, dtype=float)[1:]
    tk = np.concatenate([np.zeros(order), inner, np.full(order, float(t_end))])
    n = tk.size - order
    cols = []
    for j in range(n):
        coefs = np.zeros(n)
        coefs[: j + 1] = 1.0
        cols.append(SplineResidue(tk, coefs, order, t_end))
    return tk, cols


def fit_spline_residue(curve: TissueCurve, input: InputFunction, knots=None, order: int = 3,
                       delays=None, check_points: int = 2001) -> SegmentFit:
    """B-spline residue fit, nonnegative and nonincreasing through its coefficients.

    Spline coefficients are tail sums of nonnegative increments, which makes
    the spline nonnegative and nonincreasing. The shape is verified on a
    dense grid; if that check fails the step fit is returned instead.
    """
    sch = curve.schedule
    knots = step_knots(sch) if knots is None else np.asarray(knots, dtype=float)
    delays = default_delay_grid() if delays is None else np.asarray(delays, dtype=float)
    if order == 1:
        return fit_step_residue(curve, input, knots, delays)
    tk, cols = _spline_columns(knots, order, sch.t_end)
    fm = model_frame_matrix(cols, input, sch, delays)
    w = curve.weights()
    fit = fit_batch(curve.values[None, :], fm, weights0=w[None, :], max_iter=1)
    c = fit.coef[0]
    beta = np.cumsum(c[::-1])[::-1]
    res = SplineResidue(tk, beta, order, sch.t_end)
    amp = float(beta[0])
    if not res.is_monotone(check_points):
        warnings.warn("spline residue not monotone on the check grid; using the step fit",
                      stacklevel=2)
        return fit_step_residue(curve, input, knots, delays)
    if amp > 0:
        res = SplineResidue(tk, beta / amp, order, sch.t_end)
    else:
        res = patlak_residue(sch.t_end)
    return SegmentFit(res, amp, float(fit.delay[0]), float(fit.wrss[0]), c)


# --------------------------------------------------------------------------- candidates


def tail_normalized(r: Residue) -> Residue | None:
    """``(R - R(T_e)) / (R(0) - R(T_e))`` or None if the residue has no nonretained part."""
    r0 = r.initial_value
    re = float(r(np.array([r.t_end]))[0])
    span = r0 - re
    if not span > 1e-12 * max(abs(r0), 1e-300):
        return None
    if isinstance(r, StepResidue):
        return StepResidue(r.knots, (r.values - re) / span, r.t_end)
    if isinstance(r, SplineResidue):
        return SplineResidue(r.knots, (r.coefs - re) / span, r.order, r.t_end)
    from .residue import MixtureResidue
    return MixtureResidue([r, patlak_residue(r.t_end)], [1.0 / span, -re / span])


def _max_distance(a: Residue, b: Residue, t_end: float) -> float:
    grid = [np.linspace(0.0, t_end, 2001)]
    for r in (a, b):
        if isinstance(r, StepResidue):
            grid.append(r.knots)
    t = np.unique(np.concatenate(grid))
    t = t[t <= t_end]
    return float(np.max(np.abs(a(t) - b(t))))


def deduplicate(candidates: Sequence[Residue], tol: float = DEDUP_DISTANCE):
    """Indices of candidates kept: each drops if within ``tol`` (max abs) of an earlier kept one."""
    kept = []
    for i, r in enumerate(candidates):
        if all(_max_distance(r, candidates[j], r.t_end) >= tol for j in kept):
            kept.append(i)
    return kept


# --------------------------------------------------------------------------- risk


@dataclass(eq=False)
class SegmentData:
    """Segment mean curves, variances and frozen delays used by the risk criterion."""

    curves: np.ndarray
    variances: np.ndarray
    delays: np.ndarray
    schedule: FrameSchedule
    sizes: np.ndarray | None = None

    def __post_init__(self):
        self.curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.delays = np.asarray(self.delays, dtype=float)
        if self.curves.shape != self.variances.shape:
            raise ValueError("curves and variances must have the same shape")
        if self.delays.shape != (self.curves.shape[0],):
            raise ValueError("one delay per segment")
        if np.any(self.variances < 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("variances must be finite and nonnegative")
        floor = np.maximum(VARIANCE_FLOOR * np.mean(self.curves**2, axis=1), np.finfo(float).tiny)
        self.variances = np.maximum(self.variances, floor[:, None])

    @property
    def K(self) -> int:
        return self.curves.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.variances

    @property
    def phi(self) -> np.ndarray:
        """Per-segment dispersion ``max(1, sum v / sum y)``."""
        sy = self.curves.sum(axis=1)
        ratio = np.where(sy > 0, self.variances.sum(axis=1) / np.where(sy > 0, sy, 1.0), np.inf)
        return np.maximum(1.0, ratio)

    @property
    def dbar(self) -> np.ndarray:
        """``(1/B) sum_b w_b y_b`` per segment."""
        return np.mean(self.weights * self.curves, axis=1)


@dataclass
class RiskEntry:
    members: tuple
    wrss: float
    penalty: float
    risk: float
    per_segment: np.ndarray = field(repr=False, default=None)


@dataclass
class RiskTrace:
    entries: list
    eliminated: list
    phi: np.ndarray
    dbar: np.ndarray
    best: int = 0

    @property
    def J(self) -> np.ndarray:
        return np.array([len(e.members) for e in self.entries])

    @property
    def risks(self) -> np.ndarray:
        return np.array([e.risk for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "J": self.J.tolist(),
            "members": [list(e.members) for e in self.entries],
            "wrss": [e.wrss for e in self.entries],
            "penalty": [e.penalty for e in self.entries],
            "risk": [e.risk for e in self.entries],
            "eliminated": list(self.eliminated),
            "phi": self.phi.tolist(),
            "dbar": self.dbar.tolist(),
            "best": self.best,
        }


class _SegmentDesigns:
    """Frame-integrated candidate curves per segment.

    With ``delays=None`` each segment uses its frozen delay; otherwise every
    segment keeps the full delay grid and the risk refits the delay.
    """

    def __init__(self, members, input, seg: SegmentData, delays=None):
        if delays is None:
            grid = np.unique(seg.delays)
            fm = model_frame_matrix(members, input, seg.schedule, grid)
            self.X = fm.matrix[np.searchsorted(grid, seg.delays)]  # (K, B, J)
            self.model = None
        else:
            self.model = model_frame_matrix(members, input, seg.schedule, delays)
            self.X = None


def risk(seg: SegmentData, X, cols: Sequence[int] | None = None) -> RiskEntry:
    """``C(J) = sum_k [WRSS_k + 2 phi_k dbar_k J]`` for the columns ``cols``.

    ``X`` is either a (K, B, J_all) array holding each segment's design at
    its frozen delay, or a :class:`FrameModel` over a delay grid, in which
    case each segment's WRSS is minimized over the grid.
    """
    w = seg.weights
    per = np.empty(seg.K)
    if isinstance(X, FrameModel):
        cols = list(range(X.matrix.shape[2])) if cols is None else list(cols)
        J = len(cols)
        if J == 0:
            per[:] = np.sum(w * seg.curves**2, axis=1)
        else:
            sub = FrameModel(X.delays, np.ascontiguousarray(X.matrix[:, :, cols]))
            for k in range(seg.K):
                per[k] = fit_batch(seg.curves[k][None, :], sub, weights0=w[k], max_iter=1).wrss[0]
    else:
        X = np.asarray(X, dtype=float)
        cols = list(range(X.shape[2])) if cols is None else list(cols)
        J = len(cols)
        for k in range(seg.K):
            if J == 0:
                r = seg.curves[k]
                per[k] = float(np.sum(w[k] * r * r))
            else:
                per[k] = wnnls(X[k][:, cols], seg.curves[k], w[k]).wrss
    pen = 2.0 * J * float(np.sum(seg.phi * seg.dbar))
    return RiskEntry(tuple(cols), float(per.sum()), pen, float(per.sum()) + pen, per)


@dataclass(eq=False)
class BasisSet:
    """Normalized basis residues; the Patlak constant is always the last member."""

    members: list
    names: list
    provenance: list
    segment_delays: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: RiskTrace | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("a basis needs at least one member")
        if self.names[-1] != PATLAK:
            raise ValueError("the last member must be the Patlak constant")
        for m in self.members:
            if not np.isclose(m.initial_value, 1.0, atol=1e-9):
                raise ValueError("basis members must satisfy R(0) = 1")

    @property
    def J(self) -> int:
        return len(self.members)

    @property
    def t_end(self) -> float:
        return self.members[-1].t_end

    def frame_model(self, input: InputFunction, schedule: FrameSchedule, delays,
                    extra_curves=()) -> FrameModel:
        return model_frame_matrix(self, input, schedule, delays, extra_curves)

    def to_dict(self) -> dict:
        return {
            "members": [m.to_dict() for m in self.members],
            "names": list(self.names),
            "provenance": list(self.provenance),
            "segment_delays": np.asarray(self.segment_delays).tolist(),
            "trace": None if self.trace is None else self.trace.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        tr = d.get("trace")
        trace = None
        if tr is not None:
            entries = [RiskEntry(tuple(m), w, p, r) for m, w, p, r in
                       zip(tr["members"], tr["wrss"], tr["penalty"], tr["risk"])]
            trace = RiskTrace(entries, tr["eliminated"], np.array(tr["phi"]), np.array(tr["dbar"]),
                              tr["best"])
        return cls([residue_from_dict(m) for m in d["members"]], list(d["names"]),
                   list(d["provenance"]), np.array(d.get("segment_delays", [])), trace)


def backward_eliminate(candidates: Sequence[Residue], seg: SegmentData, input: InputFunction,
                       names: Sequence[str] | None = None, provenance=None, refit_delays=None):
    """Greedy backward elimination on ``C(J)``; the Patlak member is never removed.

    Starts from all candidates plus Patlak and removes, one at a time, the
    candidate whose removal gives the smallest risk (ties: lowest index).
    Returns the basis at the global minimum of the trace (ties: fewer
    members) together with the trace.

    Segment delays stay frozen unless ``refit_delays`` gives a delay grid,
    in which case every candidate subset refits each segment's delay.
    """
    cands = list(candidates)
    n = len(cands)
    names = [f"c{i}" for i in range(n)] if names is None else list(names)
    provenance = list(range(n)) if provenance is None else list(provenance)
    members = cands + [patlak_residue(seg.schedule.t_end)]
    sd = _SegmentDesigns(members, input, seg, refit_delays)
    X = sd.X if sd.model is None else sd.model
    current = list(range(n + 1))
    entries = [risk(seg, X, current)]
    eliminated = []
    while len(current) > 1:
        best = None
        for idx in current[:-1]:
            trial = [c for c in current if c != idx]
            e = risk(seg, X, trial)
            if best is None or e.risk < best[1].risk:
                best = (idx, e)
        current = list(best[1].members)
        eliminated.append(names[best[0]])
        entries.append(best[1])
    risks = np.array([e.risk for e in entries])
    # entries run from most to fewest members; prefer fewer members on ties
    order = np.arange(len(entries))[::-1]
    b = int(order[np.argmin(risks[::-1])])
    trace = RiskTrace(entries, eliminated, seg.phi, seg.dbar, b)
    keep = list(entries[b].members)
    basis = BasisSet([members[i] for i in keep], [names[i] if i < n else PATLAK for i in keep],
                     [provenance[i] if i < n else PATLAK for i in keep], seg.delays.copy(), trace)
    return basis, trace


def build_basis(curves, variances, input: InputFunction, schedule: FrameSchedule, knots=None,
                delays=None, dedup: float = DEDUP_DISTANCE, refit_delays: bool = False):
    """Segment step fits, candidate pool and backward elimination in one call.

    Returns ``(basis, segment_fits)``.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    knots = step_knots(schedule) if knots is None else np.asarray(knots, dtype=float)
    delays = default_delay_grid() if delays is None else np.asarray(delays, dtype=float)
    X = step_design(input, schedule, knots, delays)
    fits = [fit_step_residue(TissueCurve(y, schedule, v), input, knots, delays, X)
            for y, v in zip(curves, variances)]
    seg = SegmentData(curves, variances, np.array([f.delay for f in fits]), schedule)
    pool, prov = [], []
    # highest weighted signal-to-noise first so duplicates keep the better-determined shape
    snr = np.sum(seg.weights * seg.curves**2, axis=1)
    for k in np.argsort(-snr, kind="stable"):
        c = tail_normalized(fits[k].residue) if fits[k].amplitude > 0 else None
        if c is not None:
            pool.append(c)
            prov.append(int(k))
    keep = deduplicate(pool, dedup)
    pool = [pool[i] for i in keep]
    prov = [prov[i] for i in keep]
    names = [f"seg{p}" for p in prov]
    basis, _ = backward_eliminate(pool, seg, input, names, prov, delays if refit_delays else None)
    return basis, fits
