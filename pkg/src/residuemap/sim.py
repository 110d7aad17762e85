"""Region-structured simulation study: voxel data generation, replicate MSE
of regional residue estimates, the log-linear dose regression and the
large-sample coefficient covariance.

Dose ``kappa`` scales the arterial input (``Cp = kappa * unit-peak shape``),
so with fixed per-voxel dispersion the voxel means scale with ``kappa`` and
the variance of per-unit-dose coefficient estimates scales as ``1/kappa``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .basis import default_delay_grid
from .nnls import fit_batch
from .presets import StudyPreset, get_preset
from .residue import ExponentialResidue, StepResidue, kinetic_summary
from .timecore import FrameModel, model_frame_matrix, shifted_cumulative_frames

METHODS = ("voxel-average", "region-fit")
TARGETS = ("residue", "flux", "VD", "flow")
FAIL_FRACTION = 0.05


@dataclass
class SimConfig:
    """Everything needed to reproduce a study.

    ``phi_sq`` are per-region dispersions of the region-mean error; by
    default ``phi0_sq * N_max / N_k`` so every voxel has the same noise
    level. ``doses`` default to six log-spaced levels with ratio 20 whose
    top level gives voxel CoV ``preset.noise_cov`` at the peak frame of the
    largest region.
    """

    preset: StudyPreset
    doses: np.ndarray | None = None
    replicates: int = 50
    delay_cov: float = 0.20
    alpha_cov: float = 0.20
    cov_exponent: float = 1.0 / 3.0
    phi0_sq: float = 1.0
    phi_sq: np.ndarray | None = None
    n_doses: int = 6
    dose_ratio: float = 20.0
    delay_grid: np.ndarray = field(default_factory=default_delay_grid)
    tau_v: float = 1.0
    voxel_delay: str = "region"
    seed: int = 0

    def __post_init__(self):
        p = self.preset
        self.sizes = np.asarray(p.sizes, dtype=int)
        if np.any(self.sizes < 1):
            raise ValueError("region sizes must be >= 1")
        if not (0 <= self.delay_cov < 1 and 0 <= self.alpha_cov < 1):
            raise ValueError("CoV caps must be in [0, 1)")
        if self.dose_ratio <= 1:
            raise ValueError("dose ratio must be > 1")
        if self.phi_sq is None:
            self.phi_sq = self.phi0_sq * self.sizes.max() / self.sizes
        self.phi_sq = np.asarray(self.phi_sq, dtype=float)
        self.delay_grid = np.asarray(self.delay_grid, dtype=float)
        self.table = MemberTable(p, max(float(np.max(p.delays)) * 3 + 0.1, self.delay_grid[-1]))
        if self.doses is None:
            top = self._top_dose()
            self.doses = np.geomspace(top / self.dose_ratio, top, self.n_doses)
        self.doses = np.asarray(self.doses, dtype=float)

    @property
    def K(self) -> int:
        return self.sizes.size

    @property
    def J(self) -> int:
        return len(self.preset.members)

    def region_cov(self, k: int) -> tuple:
        """(delay CoV, coefficient CoV) for region k, proportional to size^exponent."""
        r = (self.sizes[k] / self.sizes.max()) ** self.cov_exponent
        return self.delay_cov * r, self.alpha_cov * r

    def _top_dose(self) -> float:
        k = int(np.argmax(self.sizes))
        mu = self.table.means(np.array([self.preset.delays[k]]), self.preset.alphas[k][None, :])[0]
        peak = float(mu.max())
        # voxel variance N_k phi_k^2 mu  ->  CoV^2 = N_k phi_k^2 / (kappa * peak)
        return self.sizes[k] * self.phi_sq[k] / (self.preset.noise_cov**2 * peak)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset.name,
            "doses": self.doses.tolist(),
            "replicates": self.replicates,
            "delay_cov": self.delay_cov,
            "alpha_cov": self.alpha_cov,
            "cov_exponent": self.cov_exponent,
            "phi_sq": self.phi_sq.tolist(),
            "delay_grid": self.delay_grid.tolist(),
            "tau_v": self.tau_v,
            "voxel_delay": self.voxel_delay,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        preset = get_preset(d.pop("preset"))
        for key in ("doses", "phi_sq", "delay_grid"):
            if key in d and d[key] is not None:
                d[key] = np.asarray(d[key], dtype=float)
        return cls(preset, **d)


class MemberTable:
    """Frame-integrated unit-dose member curves at arbitrary delays.

    Step members reduce to shifted cumulative inputs; those are tabulated on
    a fine delay grid and interpolated with cubic splines, which is exact to
    well below simulation noise.
    """

    def __init__(self, preset: StudyPreset, max_delay: float, step: float = 1.0 / 240.0):
        terms = []
        for m in preset.members:
            st = m.shift_terms()
            if st is None:
                raise ValueError("simulation members must be step residues")
            terms.append(st)
        self.shifts = np.unique(np.concatenate([s for s, _ in terms]))
        self.coef = np.zeros((self.shifts.size, len(terms)))
        for j, (s, c) in enumerate(terms):
            np.add.at(self.coef[:, j], np.searchsorted(self.shifts, s), c)
        n = int(np.ceil(max_delay / step)) + 1
        self.grid = np.arange(n) * step
        sch = preset.schedule
        g = shifted_cumulative_frames(preset.input, sch, (self.grid[:, None] + self.shifts[None, :]).ravel())
        g = g.reshape(sch.n_frames, n, self.shifts.size).transpose(1, 0, 2)  # (n, B, S)
        self.B = sch.n_frames
        self._spline = CubicSpline(self.grid, g.reshape(n, -1), axis=0)

    def members(self, delays) -> np.ndarray:
        """(V, B, J) unit-dose member curves at each delay."""
        delays = np.asarray(delays, dtype=float)
        if np.any(delays < 0) or np.any(delays > self.grid[-1]):
            raise ValueError("delay outside the tabulated range")
        g = self._spline(delays).reshape(delays.size, self.B, self.shifts.size)
        return g @ self.coef

    def means(self, delays, alphas) -> np.ndarray:
        """(V, B) unit-dose model means."""
        return np.einsum("vbj,vj->vb", self.members(delays), np.asarray(alphas, dtype=float))


def _gamma(rng, mean, cov, size):
    mean = np.asarray(mean, dtype=float)
    if cov == 0:
        return np.broadcast_to(mean, (size,) + mean.shape).copy()
    shape = 1.0 / cov**2
    out = np.zeros((size,) + mean.shape)
    pos = mean > 0
    out[:, pos] = rng.gamma(shape, mean[pos] / shape, size=(size, int(pos.sum())))
    return out


def _lognormal(rng, mean, cov, size):
    if cov == 0 or mean <= 0:
        return np.full(size, float(mean))
    s2 = np.log1p(cov**2)
    mu = np.log(mean) - s2 / 2
    return rng.lognormal(mu, np.sqrt(s2), size)


@dataclass
class RegionData:
    curves: np.ndarray  # (N, B) at dose kappa
    alphas: np.ndarray  # (N, J)
    delays: np.ndarray  # (N,)
    means: np.ndarray  # (N, B) noiseless
    dose: float


def generate_region_data(cfg: SimConfig, k: int, dose: float, rng) -> RegionData:
    """Voxel curves for region k at the given dose.

    Delays are log-normal with mean ``Delta_k``; coefficients are Gamma with
    mean ``alpha_jk``; both with CoV proportional to region size to the
    configured exponent. Errors are Gaussian with variance
    ``N_k phi_k^2 mu`` so the region-mean error has variance ``phi_k^2 mu``.
    """
    N = int(cfg.sizes[k])
    dcov, acov = cfg.region_cov(k)
    delays = _lognormal(rng, cfg.preset.delays[k], dcov, N)
    delays = np.clip(delays, 0.0, cfg.table.grid[-1])
    alphas = _gamma(rng, cfg.preset.alphas[k], acov, N)
    mu = dose * cfg.table.means(delays, alphas)
    sd = np.sqrt(N * cfg.phi_sq[k] * np.maximum(mu, 0.0))
    y = mu + sd * rng.standard_normal(mu.shape)
    return RegionData(y, alphas, delays, mu, float(dose))


def replicate_rng(seed: int, k: int, dose_index: int, rep: int):
    """Independent stream per (region, dose, replicate)."""
    return np.random.default_rng([seed, k, dose_index, rep])


# --------------------------------------------------------------------------- regional estimators


def _member_functionals(members, tau_v):
    t_end = members[-1].t_end
    S = np.array([kinetic_summary(m, tau_v).as_array()[:5] for m in members])  # K_B V_B K_D V_D K_i
    flow = S[:, 0] + S[:, 2] + S[:, 4]
    return {"flux": S[:, 4], "VD": S[:, 3], "flow": flow}, residue_gram(members, t_end)


def residue_gram(members, t_end: float) -> np.ndarray:
    """``G[j, l] = int_0^T_e R_j R_l dt``; exact for step residues."""
    if all(isinstance(m, StepResidue) for m in members):
        knots = np.unique(np.concatenate([m.knots for m in members]))
        edges = np.concatenate([knots[knots < t_end], [t_end]])
        V = np.array([m(edges[:-1]) for m in members])
        return (V * np.diff(edges)) @ V.T
    nodes, w = np.polynomial.legendre.leggauss(20)
    edges = np.linspace(0.0, t_end, 401)
    t = ((edges[:-1, None] + edges[1:, None]) / 2 + (np.diff(edges)[:, None] / 2) * nodes).ravel()
    ww = (np.diff(edges)[:, None] / 2 * w).ravel()
    V = np.array([m(t) for m in members])
    return (V * ww) @ V.T


@dataclass
class FitOutcome:
    coef: np.ndarray
    delay_index: int
    mu: np.ndarray


def fit_voxel_average(data: RegionData, fm: FrameModel, dose: float,
                      voxel_delay: str = "region", region: FitOutcome | None = None) -> np.ndarray:
    """Average of unconstrained voxel-level coefficient estimates.

    Every voxel is fitted by weighted LS with the fixed weights ``1/mu``,
    where ``mu`` is the fitted region-mean curve (``region``, computed if not
    given). Voxel-level reweighting is avoided because at voxel noise it
    biases the estimates. With ``voxel_delay="region"`` all voxels share the
    region-fit delay; ``"voxel"`` searches the grid per voxel.
    """
    Y = data.curves / dose
    ybar = Y.mean(axis=0)
    if region is None:
        region = fit_region_mean(data, fm, dose)
    w = 1.0 / np.maximum(region.mu, 1e-6 * np.abs(ybar).max())
    if voxel_delay == "voxel":
        fit = fit_batch(Y, fm, weights0=w, nonneg=False, max_iter=1)
        return fit.coef.mean(axis=0)
    if voxel_delay != "region":
        raise ValueError("voxel_delay must be 'region' or 'voxel'")
    d = region.delay_index
    sub = FrameModel(fm.delays[d : d + 1], fm.matrix[d : d + 1])
    fit = fit_batch(Y, sub, weights0=w, nonneg=False, max_iter=1)
    return fit.coef.mean(axis=0)


def fit_region_mean(data: RegionData, fm: FrameModel, dose: float) -> FitOutcome:
    """Unconstrained IRLS fit of the region-mean curve.

    The delay is chosen by grid search with the common weights
    ``1/max(y, 0.01 max y)``, then IRLS runs at that delay. Comparing
    converged WRSS across delays is avoided: each delay then carries its own
    self-fitted weights, which favours delays that inflate the fitted mean
    where residuals are large.
    """
    ybar = data.curves.mean(axis=0)[None, :] / dose
    d = int(fit_batch(ybar, fm, nonneg=False, max_iter=1).delay_index[0])
    sub = FrameModel(fm.delays[d : d + 1], fm.matrix[d : d + 1])
    fit = fit_batch(ybar, sub, nonneg=False)
    return FitOutcome(fit.coef[0], d, sub.matrix[0] @ fit.coef[0])


# --------------------------------------------------------------------------- study


@dataclass
class MseTable:
    rows: list
    failures: int = 0

    def select(self, target=None, method=None) -> list:
        return [r for r in self.rows if (target is None or r["target"] == target)
                and (method is None or r["method"] == method)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["region", "size", "dose", "method", "target", "mse", "n"],
                            lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({**r, "dose": repr(float(r["dose"])), "mse": repr(float(r["mse"]))})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MseTable":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({"region": int(r["region"]), "size": int(r["size"]), "dose": float(r["dose"]),
                         "method": r["method"], "target": r["target"], "mse": float(r["mse"]),
                         "n": int(r["n"])})
        return cls(rows)


@dataclass
class StudyResult:
    table: MseTable
    errors: np.ndarray  # (K, L, R, methods, targets) estimate minus truth (ISE for residue)


def run_study(cfg: SimConfig, progress=None) -> StudyResult:
    """Replicate MSE of both regional estimators for every region, dose and target."""
    p = cfg.preset
    fm = model_frame_matrix(list(p.members), p.input, p.schedule, cfg.delay_grid)
    funcs, G = _member_functionals(list(p.members), cfg.tau_v)
    K, L, R = cfg.K, cfg.doses.size, cfg.replicates
    err = np.full((K, L, R, len(METHODS), len(TARGETS)), np.nan)
    failures = 0
    for k in range(K):
        for li, dose in enumerate(cfg.doses):
            for r in range(R):
                data = generate_region_data(cfg, k, dose, replicate_rng(cfg.seed, k, li, r))
                truth = data.alphas.mean(axis=0)
                try:
                    rf = fit_region_mean(data, fm, dose)
                    ests = (fit_voxel_average(data, fm, dose, cfg.voxel_delay, rf), rf.coef)
                except (ValueError, np.linalg.LinAlgError):
                    failures += len(METHODS)
                    continue
                for mi, est in enumerate(ests):
                    if not np.all(np.isfinite(est)):
                        failures += 1
                        continue
                    d = est - truth
                    err[k, li, r, mi, 0] = float(d @ G @ d)
                    for ti, name in enumerate(TARGETS[1:], start=1):
                        err[k, li, r, mi, ti] = float(funcs[name] @ d)
            if progress is not None:
                progress(k, li)
    total = K * L * R * len(METHODS)
    if failures > FAIL_FRACTION * total:
        raise RuntimeError(f"{failures} of {total} regional fits failed")
    rows = []
    for k in range(K):
        for li, dose in enumerate(cfg.doses):
            for mi, m in enumerate(METHODS):
                for ti, t in enumerate(TARGETS):
                    e = err[k, li, :, mi, ti]
                    e = e[np.isfinite(e)]
                    mse = float(np.mean(e)) if t == "residue" else float(np.mean(e**2))
                    rows.append({"region": k, "size": int(cfg.sizes[k]), "dose": float(dose),
                                 "method": m, "target": t, "mse": mse, "n": int(e.size)})
    return StudyResult(MseTable(rows, failures), err)


# --------------------------------------------------------------------------- regression


@dataclass
class DoseRegression:
    gamma_a: float
    gamma_a_se: float
    gamma_m: float
    gamma_m_se: float
    beta: np.ndarray
    beta_se: np.ndarray
    r2: float
    r2_adj: float
    n: int

    def to_dict(self) -> dict:
        return {"gamma_a": self.gamma_a, "gamma_a_se": self.gamma_a_se, "gamma_M": self.gamma_m,
                "gamma_M_se": self.gamma_m_se, "beta": self.beta.tolist(),
                "beta_se": self.beta_se.tolist(), "r2": self.r2, "r2_adj": self.r2_adj, "n": self.n}


def fit_dose_regression(table: MseTable, target: str = "residue") -> DoseRegression:
    """OLS of ``log MSE`` on region indicators, ``-log dose`` and a method indicator.

    The method indicator is 1 for the fit of the region-mean curve.
    """
    rows = [r for r in table.rows if r["target"] == target and r["mse"] > 0]
    if not rows:
        raise ValueError(f"no rows for target {target!r}")
    regions = sorted({r["region"] for r in rows})
    doses = {r["dose"] for r in rows}
    if len(doses) < 2:
        raise ValueError("need at least two dose levels")
    methods = {r["method"] for r in rows}
    ridx = {k: i for i, k in enumerate(regions)}
    has_m = len(methods) > 1
    p = len(regions) + 1 + int(has_m)
    n = len(rows)
    X = np.zeros((n, p))
    y = np.zeros(n)
    for i, r in enumerate(rows):
        X[i, ridx[r["region"]]] = 1.0
        X[i, len(regions)] = -np.log(r["dose"])
        if has_m:
            X[i, len(regions) + 1] = float(r["method"] == METHODS[1])
        y[i] = np.log(r["mse"])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < p or n <= p:
        raise ValueError("singular regression design")
    resid = y - X @ coef
    s2 = float(resid @ resid) / (n - p)
    cov = s2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    # regions act as the intercept, so p - 1 slope terms
    r2_adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p) if tss > 0 else 1.0
    gm, gms = (float(coef[-1]), float(se[-1])) if has_m else (0.0, 0.0)
    return DoseRegression(float(coef[len(regions)]), float(se[len(regions)]), gm, gms,
                          coef[: len(regions)], se[: len(regions)], r2, r2_adj, n)


# --------------------------------------------------------------------------- covariance


def alpha_covariance(X, alpha_hat, phi: float, kappa: float) -> np.ndarray:
    """``kappa^-1 phi^2 (X' W X)^-1`` with ``W = diag(1 / (X alpha_hat))``.

    ``X`` is the (B, J) unit-dose design at the fitted delay. Frames with a
    nonpositive fitted mean get zero weight. Raises if the normal matrix is
    singular.
    """
    X = np.asarray(X, dtype=float)
    mu = X @ np.asarray(alpha_hat, dtype=float)
    w = np.where(mu > 0, 1.0 / np.where(mu > 0, mu, 1.0), 0.0)
    A = X.T @ (w[:, None] * X)
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("singular normal matrix")
    return (phi**2 / kappa) * np.linalg.inv(A)


def study_summary(result: StudyResult) -> dict:
    reg = fit_dose_regression(result.table, "residue")
    return {"regression": reg.to_dict(), "failures": result.table.failures}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# --------------------------------------------------------------------------- ROI model comparison


ROI_TRUTHS = ("mixture", "1c")


@dataclass
class RoiStudyConfig:
    """Synthetic ROI curves for the mixture vs compartment CV comparison.

    Curves are in count units: each noiseless curve is scaled so that its
    peak frame has CoV ``noise_cov`` with variance equal to the mean. The
    mixture basis is built from ``n_training`` curves of the same population
    at ``training_cov_factor * noise_cov``.
    """

    preset: str = "fdg"
    n_rois: int = 100
    noise_cov: float = 0.05
    delay_range: tuple = (0.05, 0.30)
    delay_step: float = 0.0
    alpha_cov: float = 0.20
    k1_range: tuple = (0.05, 0.15)
    k2_range: tuple = (0.10, 0.50)
    vb_range: tuple = (0.02, 0.06)
    n_training: int = 30
    training_cov_factor: float = 0.5
    rates: tuple = (0.02, 2.0, 64)
    seed: int = 0

    def rate_grid(self) -> np.ndarray:
        lo, hi, n = self.rates
        return np.geomspace(lo, hi, int(n))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiStudyConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def roi_means(cfg: RoiStudyConfig, truth: str, n: int, rng) -> np.ndarray:
    """(n, B) noiseless unit-dose ROI curves.

    ``"mixture"``: a random preset region's coefficients times independent
    Gamma factors with CoV ``alpha_cov``. ``"1c"``: one tissue compartment
    plus a blood term, parameters uniform on the configured ranges. Delays
    are uniform on ``delay_range`` for both, rounded to multiples of
    ``delay_step`` when it is positive.
    """
    if truth not in ROI_TRUTHS:
        raise ValueError(f"truth must be one of {ROI_TRUTHS}")
    p = get_preset(cfg.preset)
    sch, inp = p.schedule, p.input
    out = np.zeros((n, sch.n_frames))
    for i in range(n):
        d = rng.uniform(*cfg.delay_range)
        if cfg.delay_step > 0:
            d = round(d / cfg.delay_step) * cfg.delay_step
        if truth == "mixture":
            k = rng.integers(len(p.sizes))
            a = p.alphas[k] * _gamma(rng, np.ones(p.alphas.shape[1]), cfg.alpha_cov, 1)[0]
            fm = model_frame_matrix(list(p.members), inp, sch, [d])
            out[i] = fm.matrix[0] @ a
        else:
            K1, k2, vb = (rng.uniform(*r) for r in (cfg.k1_range, cfg.k2_range, cfg.vb_range))
            fm = model_frame_matrix([ExponentialResidue([K1], [k2], sch.t_end)], inp, sch, [d], (inp,))
            out[i] = fm.matrix[0] @ np.array([1.0, vb])
    return out


def count_noise(mu, cov: float, rng):
    """Scale each curve to counts (peak CoV ``cov``) and add Var = mean noise.

    Returns ``(counts, variance)``.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    kappa = 1.0 / (cov**2 * mu.max(axis=1, keepdims=True))
    m = np.maximum(mu * kappa, 0.0)
    return m + np.sqrt(m) * rng.standard_normal(m.shape), m


def roi_weights(Y) -> np.ndarray:
    """Fixed CV weights ``1/max(y, 0.01 max y)`` per curve."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return 1.0 / np.maximum(Y, 0.01 * Y.max(axis=1, keepdims=True))


@dataclass
class RoiComparisonResult:
    truth: str
    basis: object
    batches: list  # CvComparison per batch

    def n_significant(self, level: float = 0.05) -> int:
        return sum(c.sign_p < level for c in self.batches)

    def to_dict(self) -> dict:
        return {"truth": self.truth, "basis": list(self.basis.names),
                "batches": [{"wins_mixture": c.wins_a, "n": c.n, "sign_p": c.sign_p,
                             "sign_p_greater": c.sign_p_greater} for c in self.batches]}


def run_roi_comparison(cfg: RoiStudyConfig, truth: str, n_batches: int = 1,
                       progress=None) -> RoiComparisonResult:
    """Mixture model vs compartment model by leave-one-out CV on synthetic ROIs.

    The compartment model is the irreversible 2-compartment model for
    mixture truth and the 1-compartment model for 1-compartment truth; both
    carry a blood term and search the full delay grid and the rate grid.
    """
    from .basis import build_basis
    from .diagnostics import compare_cv, compartment_fitter, mixture_fitter

    p = get_preset(cfg.preset)
    sch, inp = p.schedule, p.input
    delays = default_delay_grid()
    rng = np.random.default_rng([cfg.seed, 0])
    ytr, vtr = count_noise(roi_means(cfg, truth, cfg.n_training, rng),
                           cfg.training_cov_factor * cfg.noise_cov, rng)
    basis, _ = build_basis(ytr, vtr, inp, sch)
    fa = mixture_fitter(basis, inp, sch, delays)
    fb = compartment_fitter("2c" if truth == "mixture" else "1c", inp, sch, delays,
                            rates=cfg.rate_grid(), blood=True)
    batches = []
    for b in range(n_batches):
        rng = np.random.default_rng([cfg.seed, 1, b])
        y, _ = count_noise(roi_means(cfg, truth, cfg.n_rois, rng), cfg.noise_cov, rng)
        batches.append(compare_cv(y, roi_weights(y), fa, fb))
        if progress is not None:
            progress(b + 1, n_batches)
    return RoiComparisonResult(truth, basis, batches)
