"""Residue functions, their vascular/distribution/retention decomposition and
the five-number kinetic summary.

A residue ``R(t)`` on ``[0, T_e]`` is nonnegative and nonincreasing. With a
vascular cutoff ``tau_v``::

    R_B(t) = R(min(t, tau_v)) - R(tau_v)
    R_D(t) = R(max(t, tau_v)) - R(T_e)
    R_X(t) = R(T_e)

so that ``R_B + R_D + R_X = R``. Flows are component maxima (values at 0) and
volumes are their integrals over ``[0, T_e]``.

Note: the commonly quoted form ``R_B(t) = R(min(t, tau_v))`` double counts
``R(tau_v)``; the subtraction above is what makes the three parts add up and
is the form under which the compartmental limits for K_D, V_D and K_i hold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from .timecore import ExpSumCurve, InputFunction, ShiftSumCurve, SumCurve, convolve

DEFAULT_TAU_V = 1.0


class Residue:
    """Base class. Subclasses implement ``__call__``, ``integral`` and ``to_dict``."""

    t_end: float
    form: str = "abstract"

    def __call__(self, t):
        raise NotImplementedError

    def integral(self, a: float, b: float) -> float:
        raise NotImplementedError

    def exact_curve(self, input: InputFunction, delay: float = 0.0):
        """Closed-form convolution with ``input`` or ``None`` if there is none."""
        terms = self.shift_terms()
        if terms is None:
            return None
        return ShiftSumCurve(input, terms[0], terms[1], delay)

    def shift_terms(self):
        """``(shifts, coefs)`` with ``R * Cp = sum_m coefs[m] CumCp(t - shifts[m])``, or None."""
        return None

    def clipped(self, lo: float, hi: float, offset: float) -> "Residue":
        """``t -> R(clip(t, lo, hi)) - offset``."""
        return ClippedResidue(self, lo, hi, offset)

    def scaled(self, factor: float) -> "Residue":
        return MixtureResidue([self], [factor])

    @property
    def initial_value(self) -> float:
        return float(self(np.array([0.0]))[0])

    def is_monotone(self, n: int = 2001, atol: float = 1e-12) -> bool:
        t = np.linspace(0.0, self.t_end, n)
        r = self(t)
        return bool(np.all(r >= -atol) and np.all(np.diff(r) <= atol))

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _meta(self, knots, values, **extra):
        r0 = self.initial_value
        unit = bool(np.isclose(r0, 1.0, rtol=0, atol=1e-12))
        d = {
            "form": self.form,
            "knots": [float(k) for k in knots],
            "values": [float(v) for v in values],
            "normalization": "unit" if unit else "scaled",
            "T_e": float(self.t_end),
            "units": "1" if unit else "ml/g/min",
        }
        d.update(extra)
        return d


class StepResidue(Residue):
    """Piecewise constant: ``values[i]`` on ``[knots[i], knots[i+1])``; last value holds."""

    def __init__(self, knots, values, t_end: float):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.ndim != 1 or knots.shape != values.shape or knots.size == 0:
            raise ValueError("knots and values must be equal-length 1-D sequences")
        if knots[0] != 0.0:
            raise ValueError("first knot must be 0")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if not t_end > 0:
            raise ValueError("T_e must be > 0")
        self.knots = knots
        self.values = values
        self.t_end = float(t_end)

    @property
    def form(self):
        return "constant" if self.values.size == 1 else "piecewise-constant"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, None)
        return self.values[idx]

    def integral(self, a, b):
        if b <= a:
            return 0.0
        edges = np.append(self.knots, np.inf)
        lo = np.clip(edges[:-1], a, b)
        hi = np.clip(edges[1:], a, b)
        total = float(np.sum(self.values * (hi - lo)))
        if a < 0:
            total += self.values[0] * (min(b, 0.0) - a)
        return total

    def shift_terms(self):
        coefs = np.concatenate([[self.values[0]], np.diff(self.values)])
        return self.knots.copy(), coefs

    def clipped(self, lo, hi, offset):
        inner = self.knots[(self.knots > lo) & (self.knots <= hi)]
        knots = np.concatenate([[0.0], inner])
        vals = self(np.concatenate([[max(lo, 0.0)], inner])) - offset
        return StepResidue(knots, vals, self.t_end)

    def scaled(self, factor):
        return StepResidue(self.knots, self.values * factor, self.t_end)

    def to_dict(self):
        return self._meta(self.knots, self.values)


def patlak_residue(t_end: float, value: float = 1.0) -> StepResidue:
    """The constant (Patlak) residue."""
    return StepResidue([0.0], [value], t_end)


class ExponentialResidue(Residue):
    """``R(t) = sum_i a_i exp(-k_i t)``; a zero rate is a constant term."""

    form = "exponential"

    def __init__(self, amplitudes, rates, t_end: float):
        self.amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        self.rates = np.atleast_1d(np.asarray(rates, dtype=float))
        if self.amplitudes.shape != self.rates.shape:
            raise ValueError("amplitudes and rates must match")
        if np.any(self.rates < 0):
            raise ValueError("rates must be >= 0")
        self.t_end = float(t_end)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.tensordot(self.amplitudes, np.exp(-np.multiply.outer(self.rates, t)), axes=1)

    def integral(self, a, b):
        if b <= a:
            return 0.0
        total = 0.0
        for amp, k in zip(self.amplitudes, self.rates):
            if k == 0:
                total += amp * (b - a)
            else:
                total += amp * np.exp(-k * a) * -np.expm1(-k * (b - a)) / k
        return float(total)

    def exact_curve(self, input, delay=0.0):
        return ExpSumCurve(input, self.amplitudes, self.rates, delay)

    def scaled(self, factor):
        return ExponentialResidue(self.amplitudes * factor, self.rates, self.t_end)

    def to_dict(self):
        return self._meta(self.rates, self.amplitudes)


class SplineResidue(Residue):
    """B-spline residue of the given order (order 1 = piecewise constant)."""

    form = "spline"

    def __init__(self, knots, coefs, order: int, t_end: float):
        self.knots = np.asarray(knots, dtype=float)
        self.coefs = np.asarray(coefs, dtype=float)
        self.order = int(order)
        if self.knots.size != self.coefs.size + self.order:
            raise ValueError("need len(knots) == len(coefs) + order")
        self.t_end = float(t_end)
        self._spline = BSpline(self.knots, self.coefs, self.order - 1, extrapolate=False)
        self._lo = self.knots[self.order - 1]
        self._hi = self.knots[-self.order]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self._lo, np.nextafter(self._hi, -np.inf))
        return self._spline(tc)

    def _as_step(self):
        if self.order != 1:
            return None
        # degree-0 B-splines are interval indicators
        return StepResidue(self.knots[:-1], self.coefs, self.t_end)

    def shift_terms(self):
        step = self._as_step()
        return None if step is None else step.shift_terms()

    def integral(self, a, b):
        if b <= a:
            return 0.0
        lo, hi = max(a, self._lo), min(b, self._hi)
        total = float(self._spline.integrate(lo, hi)) if hi > lo else 0.0
        # constant extension outside the knot span
        if b > self._hi:
            total += float(self(np.array([self._hi]))[0]) * (b - max(a, self._hi))
        return total

    def scaled(self, factor):
        return SplineResidue(self.knots, self.coefs * factor, self.order, self.t_end)

    def to_dict(self):
        return self._meta(self.knots, self.coefs, order=self.order)


class ClippedResidue(Residue):
    """``t -> base(clip(t, lo, hi)) - offset``."""

    form = "clipped"

    def __init__(self, base: Residue, lo: float, hi: float, offset: float):
        self.base = base
        self.lo = float(lo)
        self.hi = float(hi)
        self.offset = float(offset)
        self.t_end = base.t_end

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.base(np.clip(t, self.lo, self.hi)) - self.offset

    def integral(self, a, b):
        if b <= a:
            return 0.0
        lo, hi = self.lo, self.hi
        total = 0.0
        if a < lo:
            total += float(self.base(np.array([lo]))[0]) * (min(b, lo) - a)
        m0, m1 = max(a, lo), min(b, hi)
        if m1 > m0:
            total += self.base.integral(m0, m1)
        if b > hi:
            total += float(self.base(np.array([hi]))[0]) * (b - max(a, hi))
        return total - self.offset * (b - a)

    def to_dict(self):
        return {"form": self.form, "base": self.base.to_dict(), "lo": self.lo,
                "hi": self.hi, "offset": self.offset, "T_e": self.t_end}


class MixtureResidue(Residue):
    """``sum_j w_j R_j``."""

    form = "mixture"

    def __init__(self, members: Sequence[Residue], weights):
        self.members = list(members)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (len(self.members),):
            raise ValueError("one weight per member")
        self.t_end = min(m.t_end for m in self.members) if self.members else 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for w, m in zip(self.weights, self.members):
            if w != 0:
                out = out + w * m(t)
        return out

    def integral(self, a, b):
        return float(sum(w * m.integral(a, b) for w, m in zip(self.weights, self.members)))

    def exact_curve(self, input, delay=0.0):
        curves = [m.exact_curve(input, delay) for m in self.members]
        if any(c is None for c in curves):
            return None
        return SumCurve(curves, self.weights)

    def shift_terms(self):
        terms = [m.shift_terms() for m in self.members]
        if any(t is None for t in terms):
            return None
        shifts = np.concatenate([s for s, _ in terms])
        coefs = np.concatenate([w * c for w, (_, c) in zip(self.weights, terms)])
        return shifts, coefs

    def to_dict(self):
        return {"form": self.form, "weights": self.weights.tolist(),
                "members": [m.to_dict() for m in self.members], "T_e": self.t_end}


def residue_from_dict(d: dict) -> Residue:
    form = d["form"]
    if form in ("piecewise-constant", "constant"):
        return StepResidue(d["knots"], d["values"], d["T_e"])
    if form == "exponential":
        return ExponentialResidue(d["values"], d["knots"], d["T_e"])
    if form == "spline":
        return SplineResidue(d["knots"], d["values"], d["order"], d["T_e"])
    if form == "mixture":
        return MixtureResidue([residue_from_dict(m) for m in d["members"]], d["weights"])
    if form == "clipped":
        return ClippedResidue(residue_from_dict(d["base"]), d["lo"], d["hi"], d["offset"])
    raise ValueError(f"unknown residue form {form!r}")


# --------------------------------------------------------------------------- decomposition


@dataclass(frozen=True)
class ResidueDecomposition:
    vascular: Residue
    distribution: Residue
    retained: Residue
    tau_v: float
    t_end: float


@dataclass(frozen=True)
class KineticSummary:
    """Flows K_B, K_D, K_i (ml/g/min), volumes V_B, V_D (ml/g), extraction fraction."""

    K_B: float
    V_B: float
    K_D: float
    V_D: float
    K_i: float
    zeta: float

    FIELDS = ("K_B", "V_B", "K_D", "V_D", "K_i", "zeta")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS])

    def to_dict(self) -> dict:
        return asdict(self)


def _check_tau(tau_v, t_end):
    if not (0 < tau_v < t_end):
        raise ValueError(f"tau_v must lie in (0, T_e={t_end}), got {tau_v}")


def _at(r: Residue, t: float) -> float:
    return float(r(np.array([t]))[0])


def decompose(r: Residue, tau_v: float = DEFAULT_TAU_V) -> ResidueDecomposition:
    """Split ``r`` into vascular, in-distribution and retained parts."""
    t_end = r.t_end
    _check_tau(tau_v, t_end)
    r_tau, r_end = _at(r, tau_v), _at(r, t_end)
    vascular = r.clipped(0.0, tau_v, r_tau)
    distribution = r.clipped(tau_v, np.inf, r_end)
    retained = patlak_residue(t_end, r_end)
    return ResidueDecomposition(vascular, distribution, retained, tau_v, t_end)


def kinetic_summary(r: Residue, tau_v: float = DEFAULT_TAU_V) -> KineticSummary:
    """Five-number summary plus extraction fraction of residue ``r``."""
    t_end = r.t_end
    _check_tau(tau_v, t_end)
    r0, r_tau, r_end = _at(r, 0.0), _at(r, tau_v), _at(r, t_end)
    v_b = r.integral(0.0, tau_v) - tau_v * r_tau
    v_d = tau_v * r_tau + r.integral(tau_v, t_end) - t_end * r_end
    zeta = r_end / r0 if r0 != 0 else 0.0
    return KineticSummary(K_B=r0 - r_tau, V_B=v_b, K_D=r_tau - r_end, V_D=v_d, K_i=r_end, zeta=zeta)


def concentration_components(r: Residue, input: InputFunction, tau_v: float = DEFAULT_TAU_V,
                             delay: float = 0.0, step: float | None = None):
    """Vascular, in-distribution and retained tissue curves (C_V, C_D, C_X)."""
    parts = decompose(r, tau_v)
    return tuple(
        convolve(p, input, delay, step=step)
        for p in (parts.vascular, parts.distribution, parts.retained)
    )


# --------------------------------------------------------------------------- compartments


@dataclass(frozen=True)
class CompartmentParams:
    """One-compartment (K1, k2) or irreversible two-compartment (K1, k2, k3; k4 = 0)."""

    model: str
    K1: float
    k2: float
    k3: float = 0.0

    def __post_init__(self):
        if self.model not in ("1c", "2c"):
            raise ValueError("model must be '1c' or '2c'")
        if not (self.K1 > 0 and self.k2 > 0 and self.k3 >= 0):
            raise ValueError("need K1 > 0, k2 > 0, k3 >= 0")
        if self.model == "1c" and self.k3 != 0:
            raise ValueError("one-compartment model has no k3")


def compartment_residue(p: CompartmentParams, t_end: float) -> ExponentialResidue:
    if p.model == "1c":
        return ExponentialResidue([p.K1], [p.k2], t_end)
    rate = p.k2 + p.k3
    return ExponentialResidue([p.K1 * p.k3 / rate, p.K1 * p.k2 / rate], [0.0, rate], t_end)


# --------------------------------------------------------------------------- mixtures


def mixture_residue(alphas, basis, allow_negative: bool = False) -> Residue:
    """Nonnegative combination of basis members (BasisSet or list of residues).

    Step-type members are collapsed into a single StepResidue on the union of
    their knots.
    """
    members = list(getattr(basis, "members", basis))
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (len(members),):
        raise ValueError(f"expected {len(members)} weights, got {alphas.shape}")
    if not allow_negative and np.any(alphas < 0):
        raise ValueError("mixture weights must be nonnegative")
    if members and all(isinstance(m, StepResidue) for m in members):
        t_end = min(m.t_end for m in members)
        knots = np.unique(np.concatenate([m.knots for m in members]))
        values = np.zeros_like(knots)
        for a, m in zip(alphas, members):
            if a != 0:
                values = values + a * m(knots)
        return StepResidue(knots, values, t_end)
    return MixtureResidue(members, alphas)
