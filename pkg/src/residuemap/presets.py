"""Default FDG-like and H2O-like study set-ups.

Truths are step residues on the same geometric knot grid the basis builder
uses, so that they are exactly representable by segment fits. Regional
coefficients and delays are synthetic "normal brain" values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import step_knots
from .residue import StepResidue, patlak_residue
from .timecore import DECAY_F18, DECAY_O15, FrameSchedule, InputFunction

FDG_SIZES = (20, 22, 39, 73, 85, 92, 93, 287, 345, 1519)
H2O_SIZES = (20, 31, 42, 128, 173, 195, 213, 394, 399, 925)

INJECTION = 0.9  # minutes; input arrives near the end of the first (1 min) frame


def fdg_schedule() -> FrameSchedule:
    """31 frames over 90 min: 1 min, 4x15 s, 4x30 s, 4x1 min, 4x3 min, 14x5 min."""
    d = [1.0] + [0.25] * 4 + [0.5] * 4 + [1.0] * 4 + [3.0] * 4 + [5.0] * 14
    return FrameSchedule.from_durations(d, decay=DECAY_F18)


def h2o_schedule() -> FrameSchedule:
    """42 frames over 8.25 min: 1 min, 5x3 s, 10x6 s, 12x10 s, 8x15 s, 6x20 s."""
    d = [60.0] + [3.0] * 5 + [6.0] * 10 + [10.0] * 12 + [15.0] * 8 + [20.0] * 6
    return FrameSchedule.from_durations(np.array(d) / 60.0, decay=DECAY_O15)


def _sample_grid(t0, t_end, fine=0.005, coarse=0.25, split=5.0):
    a = np.arange(t0, t0 + split, fine)
    b = np.arange(t0 + split, t_end + coarse, coarse)
    return np.concatenate([[0.0], a, b])


def fdg_input(t_end: float = 90.0) -> InputFunction:
    """Three-exponential bolus shape with unit peak, injected at ``INJECTION``."""
    t = _sample_grid(INJECTION, t_end)
    u = np.clip(t - INJECTION, 0.0, None)
    a1, a2, a3 = 851.1225, 21.8798, 20.8113
    l1, l2, l3 = -4.13465, -0.1191, -0.0104
    cp = (a1 * u - a2 - a3) * np.exp(l1 * u) + a2 * np.exp(l2 * u) + a3 * np.exp(l3 * u)
    cp = np.where(t > INJECTION, np.maximum(cp, 0.0), 0.0)
    return InputFunction(t, cp).normalized()


def h2o_input(t_end: float = 8.25) -> InputFunction:
    """Gamma-variate bolus plus a slow recirculation term, unit peak."""
    t = _sample_grid(INJECTION, t_end, fine=0.002, coarse=0.05, split=3.0)
    u = np.clip(t - INJECTION, 0.0, None)
    bolus = u**2 * np.exp(-u / 0.1)
    recirc = 0.004 * (1 - np.exp(-u / 0.5)) * np.exp(-u / 10.0)
    return InputFunction(t, bolus + recirc).normalized()


def step_shape(fn, knots, t_end):
    """Step residue with values equal to the interval averages of ``fn``, normalized to 1 at 0."""
    edges = np.concatenate([knots, [t_end]])
    vals = []
    for a, b in zip(edges[:-1], edges[1:]):
        s = np.linspace(a, b, 201)
        vals.append(np.trapezoid(fn(s), s) / (b - a))
    vals = np.array(vals)
    return StepResidue(knots, vals / vals[0], t_end)


def vascular_shape(knots, t_end) -> StepResidue:
    """Unit indicator of the first knot interval (large-vessel transit)."""
    v = np.zeros(len(knots))
    v[0] = 1.0
    return StepResidue(knots, v, t_end)


@dataclass(frozen=True)
class StudyPreset:
    name: str
    schedule: FrameSchedule
    input: InputFunction
    members: tuple
    member_names: tuple
    sizes: tuple
    alphas: np.ndarray  # (K, J)
    delays: np.ndarray  # (K,)
    noise_cov: float  # voxel-level CoV at the top dose, peak frame of the largest region
    targets: tuple


def fdg_preset() -> StudyPreset:
    sch = fdg_schedule()
    te = sch.t_end
    knots = step_knots(sch)
    dist = step_shape(lambda s: 0.5 * np.exp(-0.15 * s) + 0.5 * np.exp(-0.8 * s), knots, te)
    members = (vascular_shape(knots, te), dist, patlak_residue(te))
    # columns: vascular (V_B / first knot), distribution flow, flux
    vb = np.array([0.030, 0.045, 0.050, 0.035, 0.060, 0.040, 0.055, 0.035, 0.050, 0.045])
    kd = np.array([0.045, 0.090, 0.060, 0.080, 0.100, 0.050, 0.070, 0.055, 0.085, 0.065])
    ki = np.array([0.012, 0.035, 0.020, 0.030, 0.042, 0.016, 0.028, 0.018, 0.038, 0.025])
    alphas = np.column_stack([vb / knots[1], kd, ki])
    delays = np.array([0.10, 0.20, 0.13, 0.27, 0.17, 0.23, 0.07, 0.30, 0.15, 0.20])
    return StudyPreset("fdg", sch, fdg_input(te), members, ("vascular", "distribution", "patlak"),
                       FDG_SIZES, alphas, delays, 0.04, ("residue", "flux", "VD"))


def h2o_preset() -> StudyPreset:
    sch = h2o_schedule()
    te = sch.t_end
    knots = step_knots(sch)
    fast = step_shape(lambda s: np.exp(-1.2 * s), knots, te)
    slow = step_shape(lambda s: np.exp(-0.3 * s), knots, te)
    members = (vascular_shape(knots, te), fast, slow, patlak_residue(te))
    vb = np.array([0.030, 0.050, 0.040, 0.045, 0.035, 0.055, 0.040, 0.050, 0.030, 0.045])
    f1 = np.array([0.45, 0.20, 0.35, 0.10, 0.50, 0.25, 0.40, 0.15, 0.30, 0.55])
    f2 = np.array([0.10, 0.25, 0.15, 0.20, 0.05, 0.30, 0.12, 0.22, 0.18, 0.08])
    px = np.array([0.010, 0.020, 0.015, 0.025, 0.010, 0.020, 0.015, 0.020, 0.015, 0.010])
    alphas = np.column_stack([vb / knots[1], f1, f2, px])
    delays = np.array([0.10, 0.17, 0.13, 0.23, 0.07, 0.20, 0.13, 0.27, 0.10, 0.17])
    return StudyPreset("h2o", sch, h2o_input(te), members,
                       ("vascular", "fast", "slow", "patlak"), H2O_SIZES, alphas, delays, 0.06,
                       ("residue", "flow", "VD"))


PRESETS = {"fdg": fdg_preset, "h2o": h2o_preset}


def get_preset(name: str) -> StudyPreset:
    try:
        return PRESETS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
