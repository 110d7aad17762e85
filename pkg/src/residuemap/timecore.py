"""Frame schedules, arterial input curves, convolution and frame integration.

Times are in minutes throughout. The forward model for one tissue curve is

    C(t)  = int_0^t R(t - s) Cp(s - delay) ds
    mu_b  = int_{t_b}^{tbar_b} C(t) exp(-lambda t) dt

Residues whose convolution has a closed form (step functions, constants and
sums of exponentials) are convolved exactly against the piecewise-linear
input. Anything else goes through a composite-trapezoid grid with one
Richardson step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import make_interp_spline

LN2 = math.log(2.0)
#: Decay constants in 1/min. Configuration defaults only; callers pass lambda explicitly.
DECAY_F18 = LN2 / 109.77
DECAY_O15 = LN2 / 2.037

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FrameSchedule:
    """Acquisition time bins ``[t_start, t_end)`` plus the isotope decay constant."""

    starts: np.ndarray
    ends: np.ndarray
    decay: float = 0.0

    def __post_init__(self):
        starts = _readonly(self.starts)
        ends = _readonly(self.ends)
        if starts.ndim != 1 or starts.shape != ends.shape or starts.size == 0:
            raise ValueError("frame starts/ends must be equal-length non-empty 1-D sequences")
        if not np.all(np.isfinite(starts)) or not np.all(np.isfinite(ends)):
            raise ValueError("frame times must be finite")
        if np.any(starts < 0):
            raise ValueError("frame times must be >= 0")
        if np.any(ends <= starts):
            raise ValueError("every frame needs t_start < t_end")
        if np.any(starts[1:] < ends[:-1]):
            raise ValueError("frames must be non-overlapping and increasing")
        if not (self.decay >= 0 and math.isfinite(self.decay)):
            raise ValueError("decay constant must be finite and >= 0")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)
        object.__setattr__(self, "decay", float(self.decay))

    @classmethod
    def from_durations(cls, durations: Sequence[float], decay: float = 0.0, start: float = 0.0):
        edges = start + np.concatenate([[0.0], np.cumsum(durations, dtype=float)])
        return cls(edges[:-1], edges[1:], decay)

    @property
    def n_frames(self) -> int:
        return self.starts.size

    @property
    def t_end(self) -> float:
        return float(self.ends[-1])

    @property
    def durations(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.starts + self.ends)

    def quadrature_step(self) -> float:
        """Internal grid step: min(1 s, shortest frame / 4)."""
        return min(1.0 / 60.0, float(self.durations.min()) / 4.0)

    @cached_property
    def _default_quadrature(self):
        return self._build_quadrature(self.quadrature_step())

    def quadrature(self, step: float | None = None):
        """Composite 3-point Gauss-Legendre rule over every frame.

        Returns ``(nodes, weights, offsets)`` where the weights already carry the
        ``exp(-lambda t)`` factor and ``offsets`` are the first node index of
        each frame (usable with ``np.add.reduceat``).
        """
        if step is None:
            return self._default_quadrature
        return self._build_quadrature(step)

    def _build_quadrature(self, step):
        nodes, weights, offsets = [], [], []
        count = 0
        for a, b in zip(self.starts, self.ends):
            n = max(1, int(math.ceil((b - a) / step - 1e-9)))
            edges = np.linspace(a, b, n + 1)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            t = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
            w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
            offsets.append(count)
            count += t.size
            nodes.append(t)
            weights.append(w)
        t = np.concatenate(nodes)
        w = np.concatenate(weights) * np.exp(-self.decay * t)
        return _readonly(t), _readonly(w), _readonly(offsets, dtype=np.intp)

    def to_dict(self) -> dict:
        return {
            "frames": [[float(a), float(b)] for a, b in zip(self.starts, self.ends)],
            "lambda": self.decay,
        }

    def __eq__(self, other):
        if not isinstance(other, FrameSchedule):
            return NotImplemented
        return (
            np.array_equal(self.starts, other.starts)
            and np.array_equal(self.ends, other.ends)
            and self.decay == other.decay
        )


@dataclass(frozen=True, eq=False)
class InputFunction:
    """Arterial input sampled at ``times``; piecewise linear between samples.

    The curve is zero before the first sample and holds the last value after
    the final sample. ``kappa`` is the peak value, so ``normalized()`` has unit
    amplitude and ``Cp = kappa * normalized()``.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ValueError("input samples must be equal-length non-empty 1-D sequences")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("input samples must be finite")
        if t[0] < 0:
            raise ValueError("input sample times must be >= 0 (injection reference is t = 0)")
        if np.any(np.diff(t) < 0):
            raise ValueError("input sample times must be non-decreasing")
        if np.any(v < 0):
            warnings.warn("negative input samples clamped to 0", stacklevel=3)
            v = np.maximum(v, 0.0)
        if not np.any(v > 0):
            # allowed (zero input), but kappa is undefined
            pass
        object.__setattr__(self, "times", _readonly(t))
        object.__setattr__(self, "values", _readonly(v))

    @cached_property
    def _segments(self):
        t, v = self.times, self.values
        dt = np.diff(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(dt > 0, np.diff(v) / np.where(dt > 0, dt, 1.0), 0.0)
        slope = np.append(slope, 0.0)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])
        return slope, cum

    @property
    def kappa(self) -> float:
        return float(self.values.max())

    def normalized(self) -> "InputFunction":
        k = self.kappa
        if k <= 0:
            raise ValueError("zero input has no normalized shape")
        return InputFunction(self.times, self.values / k)

    def scaled(self, factor: float) -> "InputFunction":
        return InputFunction(self.times, self.values * factor)

    def shifted(self, delta: float) -> "InputFunction":
        return InputFunction(self.times + delta, self.values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        slope, _ = self._segments
        idx = np.searchsorted(self.times, t, side="right") - 1
        ok = idx >= 0
        i = np.clip(idx, 0, None)
        out = self.values[i] + slope[i] * (t - self.times[i])
        return np.where(ok, out, 0.0)

    def cumulative(self, t):
        """Exact integral of the input from 0 to ``t``."""
        t = np.asarray(t, dtype=float)
        slope, cum = self._segments
        idx = np.searchsorted(self.times, t, side="right") - 1
        ok = idx >= 0
        i = np.clip(idx, 0, None)
        d = t - self.times[i]
        out = cum[i] + self.values[i] * d + 0.5 * slope[i] * d * d
        return np.where(ok, out, 0.0)

    def exp_convolution(self, rates, t):
        """``int_0^t exp(-k (t - s)) Cp(s) ds`` for each rate ``k`` (rows) at times ``t``.

        Exact for the piecewise-linear input; ``k = 0`` reduces to ``cumulative``.
        """
        rates = np.atleast_1d(np.asarray(rates, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        slope, _ = self._segments
        ts, vs = self.times, self.values
        k = rates[:, None]
        # value of the recursion at each sample time
        at_samples = np.zeros((rates.size, ts.size))
        h = np.diff(ts)
        for i in range(ts.size - 1):
            i0, i1 = _exp_moments(rates, h[i])
            at_samples[:, i + 1] = (
                np.exp(-rates * h[i]) * at_samples[:, i] + vs[i] * i0 + slope[i] * i1
            )
        idx = np.searchsorted(ts, t, side="right") - 1
        ok = idx >= 0
        i = np.clip(idx, 0, None)
        d = np.where(ok, t - ts[i], 0.0)
        i0, i1 = _exp_moments(k, d[None, :])
        out = np.exp(-k * d[None, :]) * at_samples[:, i] + vs[i][None, :] * i0 + slope[i][None, :] * i1
        return np.where(ok[None, :], out, 0.0)


def _exp_moments(k, h):
    """``int_0^h exp(-k (h - x)) dx`` and ``int_0^h x exp(-k (h - x)) dx``."""
    k = np.asarray(k, dtype=float)
    h = np.asarray(h, dtype=float)
    kh = k * h
    small = np.abs(kh) < 1e-3
    ksafe = np.where(k == 0, 1.0, k)
    em = -np.expm1(-kh)
    i0 = np.where(small, h * (1 - kh / 2 + kh * kh / 6 - kh**3 / 24), em / ksafe)
    i1 = np.where(
        small,
        h * h * (0.5 - kh / 6 + kh * kh / 24 - kh**3 / 120),
        (kh - em) / (ksafe * ksafe),
    )
    return i0, i1


@dataclass(frozen=True, eq=False)
class TissueCurve:
    """Per-frame tissue data with optional variance and delay."""

    values: np.ndarray
    schedule: FrameSchedule
    variance: np.ndarray | None = None
    delay: float | None = None

    def __post_init__(self):
        v = _readonly(self.values)
        if v.shape != (self.schedule.n_frames,):
            raise ValueError(
                f"curve has {v.size} values but schedule has {self.schedule.n_frames} frames"
            )
        object.__setattr__(self, "values", v)
        if self.variance is not None:
            var = _readonly(self.variance)
            if var.shape != v.shape:
                raise ValueError("variance length must match values")
            object.__setattr__(self, "variance", var)

    def weights(self, floor_fraction: float = 1e-9) -> np.ndarray:
        """Inverse-variance weights with the variance floored at ``floor_fraction * mean(y^2)``."""
        y = self.values
        floor = max(floor_fraction * float(np.mean(y * y)), np.finfo(float).tiny)
        if self.variance is None:
            var = np.maximum(np.abs(y), floor)
        else:
            var = np.maximum(self.variance, floor)
        return 1.0 / var


# --------------------------------------------------------------------------- curves


class Curve:
    """Continuous tissue curve evaluator; zero for negative (delayed) time."""

    delay: float = 0.0

    def _eval(self, u):
        raise NotImplementedError

    def __call__(self, t):
        u = np.asarray(t, dtype=float) - self.delay
        return np.where(u > 0, self._eval(np.maximum(u, 0.0)), 0.0)


class ShiftSumCurve(Curve):
    """``sum_m c_m * CumCp(t - delay - s_m)``: the convolution of a step residue."""

    def __init__(self, input: InputFunction, shifts, coefs, delay: float = 0.0):
        self.input = input
        self.shifts = np.asarray(shifts, dtype=float)
        self.coefs = np.asarray(coefs, dtype=float)
        self.delay = float(delay)

    def _eval(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for s, c in zip(self.shifts, self.coefs):
            if c != 0.0:
                out = out + c * self.input.cumulative(u - s)
        return out


class ExpSumCurve(Curve):
    """Convolution of ``sum_i a_i exp(-k_i t)`` with the input, exact."""

    def __init__(self, input: InputFunction, amplitudes, rates, delay: float = 0.0):
        self.input = input
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        self.delay = float(delay)

    def _eval(self, u):
        u = np.asarray(u, dtype=float)
        flat = u.ravel()
        out = np.zeros_like(flat)
        zero = self.rates == 0
        if np.any(zero):
            out += self.amplitudes[zero].sum() * self.input.cumulative(flat)
        if np.any(~zero):
            e = self.input.exp_convolution(self.rates[~zero], flat)
            out += self.amplitudes[~zero] @ e
        return out.reshape(u.shape)


class GridCurve(Curve):
    """Cubic interpolant of values on a uniform grid starting at 0."""

    def __init__(self, step: float, values, delay: float = 0.0):
        self.step = float(step)
        self.values = np.asarray(values, dtype=float)
        self.delay = float(delay)
        grid = np.arange(self.values.size) * self.step
        self._spline = make_interp_spline(grid, self.values, k=3 if self.values.size > 3 else 1)

    @property
    def t_max(self) -> float:
        return (self.values.size - 1) * self.step

    def _eval(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u > self.t_max * (1 + 1e-12) + 1e-12):
            raise ValueError("curve evaluated beyond the residue support")
        return self._spline(np.minimum(u, self.t_max))


class SumCurve(Curve):
    """Weighted sum of curves (delay handled by the parts)."""

    def __init__(self, curves, weights):
        self.curves = list(curves)
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for c, w in zip(self.curves, self.weights):
            if w != 0.0:
                out = out + w * c(t)
        return out


class FunctionCurve(Curve):
    """Wrap a plain vectorized callable ``f(t)`` (already delayed, if at all)."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t):
        return np.asarray(self.fn(np.asarray(t, dtype=float)), dtype=float) * np.ones_like(
            np.asarray(t, dtype=float)
        )


# --------------------------------------------------------------------------- operations


def _grid_convolution(residue, input: InputFunction, t_end: float, step: float):
    n = int(math.ceil(t_end / step - 1e-9))
    t = np.arange(n + 1) * step
    r = np.asarray(residue(t), dtype=float)
    cp = input(t)
    full = np.convolve(r, cp)[: n + 1]
    return step * (full - 0.5 * (r * cp[0] + r[0] * cp))


def convolve(residue, input: InputFunction, delay: float = 0.0, t_end: float | None = None,
             step: float | None = None, method: str = "auto") -> Curve:
    """Tissue curve ``C(t) = int_0^t R(t - s) Cp(s - delay) ds``.

    ``method="auto"`` uses the exact path when the residue has one and falls
    back to the trapezoid grid otherwise; ``"grid"`` forces the grid. The
    grid result is Richardson-extrapolated from steps ``h`` and ``h/2``.
    """
    if not delay >= 0:
        raise ValueError(f"delay must be >= 0, got {delay}")
    support = float(residue.t_end)
    if t_end is None:
        t_end = support
    elif t_end > support * (1 + 1e-12):
        raise ValueError(f"residue support {support} is shorter than the observation window {t_end}")
    if method not in ("auto", "grid"):
        raise ValueError(f"unknown convolution method {method!r}")
    if method == "auto":
        exact = residue.exact_curve(input, delay)
        if exact is not None:
            return exact
    h = step if step is not None else 1.0 / 60.0
    coarse = _grid_convolution(residue, input, t_end, h)
    fine = _grid_convolution(residue, input, t_end, h / 2)
    m = coarse.size
    values = (4.0 * fine[: 2 * m - 1 : 2] - coarse) / 3.0
    values = np.maximum(values, 0.0) if np.all(coarse >= 0) else values
    return GridCurve(h, values, delay)


def frame_integrate(curve, schedule: FrameSchedule, step: float | None = None) -> np.ndarray:
    """``mu_b = int_{t_b}^{tbar_b} C(t) exp(-lambda t) dt`` for every frame."""
    nodes, weights, offsets = schedule.quadrature(step)
    vals = np.asarray(curve(nodes), dtype=float)
    if vals.shape != nodes.shape:
        vals = np.broadcast_to(vals, nodes.shape)
    return np.add.reduceat(weights * vals, offsets)


def shifted_cumulative_frames(input: InputFunction, schedule: FrameSchedule, shifts,
                              step: float | None = None, chunk: int = 64) -> np.ndarray:
    """Frame integrals of ``CumCp(t - s)`` for every shift ``s``; shape (B, S)."""
    nodes, weights, offsets = schedule.quadrature(step)
    shifts = np.asarray(shifts, dtype=float)
    out = np.empty((schedule.n_frames, shifts.size))
    for a in range(0, shifts.size, chunk):
        s = shifts[a : a + chunk]
        vals = input.cumulative(nodes[:, None] - s[None, :])
        out[:, a : a + chunk] = np.add.reduceat(weights[:, None] * vals, offsets, axis=0)
    return out


def exp_convolution_frames(input: InputFunction, schedule: FrameSchedule, rates, delays,
                           step: float | None = None, chunk: int = 4) -> np.ndarray:
    """Frame integrals of ``exp(-k t) * Cp(t - delay)`` for every rate and delay.

    Exact convolution, quadrature over frames; shape ``(B, len(rates), len(delays))``.
    One pass over the input samples serves a whole chunk of rates.
    """
    nodes, weights, offsets = schedule.quadrature(step)
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    u = (nodes[:, None] - delays[None, :]).ravel()
    pos = u > 0
    out = np.empty((schedule.n_frames, rates.size, delays.size))
    for a in range(0, rates.size, chunk):
        r = rates[a : a + chunk]
        vals = np.zeros((r.size, u.size))
        vals[:, pos] = input.exp_convolution(r, u[pos])
        vals = vals.reshape(r.size, nodes.size, delays.size) * weights[None, :, None]
        out[:, a : a + chunk, :] = np.add.reduceat(vals, offsets, axis=1).transpose(1, 0, 2)
    return out


@dataclass(frozen=True, eq=False)
class FrameModel:
    """Frame-integrated basis curves for every delay on the grid.

    ``matrix[d, b, j]`` is member ``j`` integrated over frame ``b`` with the
    input delayed by ``delays[d]``.
    """

    delays: np.ndarray
    matrix: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "delays", _readonly(self.delays))
        object.__setattr__(self, "matrix", _readonly(self.matrix))

    @property
    def n_delays(self) -> int:
        return self.delays.size

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_members(self) -> int:
        return self.matrix.shape[2]

    def at(self, delay: float) -> np.ndarray:
        d = int(np.argmin(np.abs(self.delays - delay)))
        if not np.isclose(self.delays[d], delay, rtol=0, atol=1e-9):
            raise KeyError(f"delay {delay} is not on the grid")
        return self.matrix[d]


def model_frame_matrix(members, input: InputFunction, schedule: FrameSchedule,
                       delay_grid, extra_curves=(), step: float | None = None) -> FrameModel:
    """Frame-integrated model curves of each basis member for each grid delay.

    ``members`` is a BasisSet or a sequence of residues. ``extra_curves`` are
    additional blood signals (InputFunction-like callables) appended as fixed,
    unconvolved columns sharing the voxel delay.
    """
    delays = np.asarray(delay_grid, dtype=float)
    if delays.ndim != 1 or delays.size == 0:
        raise ValueError("delay grid must be a non-empty 1-D sequence")
    if np.any(np.diff(delays) <= 0):
        raise ValueError("delay grid must be strictly increasing")
    if np.any(delays < 0):
        raise ValueError("delays must be >= 0")
    residues = list(getattr(members, "members", members))
    names = tuple(getattr(members, "names", [f"m{j}" for j in range(len(residues))]))
    n_extra = len(extra_curves)
    out = np.zeros((delays.size, schedule.n_frames, len(residues) + n_extra))

    # step-type members share one vectorized evaluation of the shifted cumulative input
    step_terms = {}
    for j, r in enumerate(residues):
        terms = r.shift_terms() if hasattr(r, "shift_terms") else None
        if terms is not None:
            step_terms[j] = terms
    if step_terms:
        base = np.unique(np.concatenate([s for s, _ in step_terms.values()]))
        all_shifts = (delays[:, None] + base[None, :]).ravel()
        g = shifted_cumulative_frames(input, schedule, all_shifts, step)
        g = g.reshape(schedule.n_frames, delays.size, base.size)
        for j, (s, c) in step_terms.items():
            pos = np.searchsorted(base, s)
            out[:, :, j] = np.einsum("bdk,k->db", g[:, :, pos], c)
    for j, r in enumerate(residues):
        if j in step_terms:
            continue
        curve0 = convolve(r, input, 0.0, t_end=schedule.t_end,
                          step=step if step is not None else schedule.quadrature_step())
        for d, delay in enumerate(delays):
            shifted = _Delayed(curve0, delay)
            out[d, :, j] = frame_integrate(shifted, schedule, step)
    for e, extra in enumerate(extra_curves):
        for d, delay in enumerate(delays):
            out[d, :, len(residues) + e] = frame_integrate(
                FunctionCurve(lambda t, f=extra, dl=delay: f(t - dl)), schedule, step
            )
    if n_extra:
        names = names + tuple(f"extra{e}" for e in range(n_extra))
    return FrameModel(delays, out, names)


class _Delayed(Curve):
    def __init__(self, curve, delay):
        self.curve = curve
        self.delay = float(delay)

    def __call__(self, t):
        return self.curve(np.asarray(t, dtype=float) - self.delay)
