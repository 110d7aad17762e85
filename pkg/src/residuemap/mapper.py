"""Voxel-level mixture fits, coefficient smoothing, regional averaging and
parametric images.

Each voxel curve is modelled as ``mu_b(Delta) = Mbar_b(Delta) @ alpha`` with
the basis frame model ``Mbar`` and a delay from the grid; optional extra
blood-signal columns follow the basis members and count towards V_B.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .basis import BasisSet, default_delay_grid
from .nnls import fit_batch
from .residue import DEFAULT_TAU_V, KineticSummary, kinetic_summary, mixture_residue
from .segmentation import DynamicVolume
from .timecore import FrameModel, InputFunction

log = logging.getLogger(__name__)

MODES = ("constrained", "unconstrained")
DEFAULT_SIGMA = 1.5
CHUNK = 4096
DELAY_WINDOW = 3


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode == "constrained"


def fit_voxel(curve, frame_model: FrameModel, mode: str = "constrained", weights0=None):
    """IRLS fit of one voxel curve with delay grid search.

    Returns ``(alpha, delay, wrss)``; a curve with any NaN gives NaNs.
    """
    nonneg = _check_mode(mode)
    y = np.asarray(curve, dtype=float)
    J = frame_model.matrix.shape[2]
    if np.isnan(y).any():
        return np.full(J, np.nan), np.nan, np.nan
    fit = fit_batch(y[None, :], frame_model, weights0=weights0, nonneg=nonneg)
    return fit.coef[0], float(fit.delay[0]), float(fit.wrss[0])


@dataclass(eq=False)
class CoefficientVolume:
    """Per-voxel coefficients, delay and WRSS on the volume grid.

    ``alpha[z, y, x, j]`` is NaN for voxels that were not fitted (outside
    the mask or flagged). ``n_extra`` trailing channels are blood-signal
    coefficients.
    """

    alpha: np.ndarray
    delay: np.ndarray
    wrss: np.ndarray
    fitted: np.ndarray
    names: tuple
    mode: str = "constrained"
    delay_grid: np.ndarray = field(default_factory=default_delay_grid)
    voxel_mm: tuple = (1.0, 1.0, 1.0)
    n_extra: int = 0
    total: np.ndarray | None = None
    flagged: np.ndarray | None = None

    @property
    def shape3(self) -> tuple:
        return self.alpha.shape[:3]

    @property
    def J(self) -> int:
        return self.alpha.shape[3]

    @property
    def n_fitted(self) -> int:
        return int(self.fitted.sum())

    @property
    def n_flagged(self) -> int:
        return 0 if self.flagged is None else int(self.flagged.sum())

    def replace_alpha(self, alpha) -> "CoefficientVolume":
        return CoefficientVolume(alpha, self.delay, self.wrss, self.fitted, self.names, self.mode,
                                 self.delay_grid, self.voxel_mm, self.n_extra, self.total, self.flagged)


def map_volume(vol: DynamicVolume, basis: BasisSet, input: InputFunction, delay_grid=None,
               mode: str = "constrained", extra_curves=(), frame_model: FrameModel | None = None,
               workers: int | None = None, progress=None,
               delay_window: int | None = DELAY_WINDOW) -> CoefficientVolume:
    """Fit every valid voxel of ``vol``.

    Voxels outside the mask are skipped; voxels with a NaN frame are flagged
    and excluded. Work is split into fixed chunks, so the result is
    bit-identical for any ``workers`` (default: ``RESIDUEMAP_WORKERS`` or 1).
    The delay search screens the grid and iterates within ``delay_window``
    steps of the screened minimum (see ``fit_batch``); ``None`` runs IRLS at
    every grid delay.
    """
    nonneg = _check_mode(mode)
    delays = default_delay_grid() if delay_grid is None else np.asarray(delay_grid, dtype=float)
    if frame_model is None:
        frame_model = basis.frame_model(input, vol.schedule, delays, extra_curves)
    delays = frame_model.delays
    if workers is None:
        workers = int(os.environ.get("RESIDUEMAP_WORKERS", "1"))
    shape3 = vol.shape3
    B, J = vol.n_frames, frame_model.matrix.shape[2]
    inside = np.ones(shape3, bool) if vol.mask is None else vol.mask
    valid = vol.valid
    flagged = inside & ~valid
    idx = np.flatnonzero(valid.ravel())
    Y = vol.data.reshape(-1, B)[idx]

    starts = list(range(0, idx.size, CHUNK))

    def work(s):
        return fit_batch(Y[s : s + CHUNK], frame_model, nonneg=nonneg, delay_window=delay_window)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            fits = list(ex.map(work, starts))
    else:
        fits = []
        for n, s in enumerate(starts):
            fits.append(work(s))
            if progress is not None:
                progress(n + 1, len(starts))
    n_vox = int(np.prod(shape3))
    alpha = np.full((n_vox, J), np.nan)
    delay = np.full(n_vox, np.nan)
    wrss = np.full(n_vox, np.nan)
    total = np.full(n_vox, np.nan)
    for s, f in zip(starts, fits):
        sel = idx[s : s + CHUNK]
        alpha[sel] = f.coef
        delay[sel] = f.delay
        wrss[sel] = f.wrss
        mu = np.einsum("vbj,vj->vb", frame_model.matrix[f.delay_index], f.coef)
        total[sel] = mu.sum(axis=1)
    if flagged.any():
        log.warning("%d voxels with NaN frames were flagged and not fitted", int(flagged.sum()))
    log.info("fitted %d voxels", idx.size)
    names = tuple(frame_model.names) if frame_model.names else tuple(f"m{j}" for j in range(J))
    return CoefficientVolume(alpha.reshape(shape3 + (J,)), delay.reshape(shape3), wrss.reshape(shape3),
                             valid.copy(), names, mode, delays, vol.voxel_mm, len(extra_curves),
                             total.reshape(shape3), flagged)


def _sigma_zyx(sigma):
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    if np.any(s < 0):
        raise ValueError("sigma must be >= 0")
    return tuple(s[::-1])  # given as (x, y, z)


def smooth_coefficients(cv: CoefficientVolume, sigma=DEFAULT_SIGMA) -> CoefficientVolume:
    """Gaussian smoothing of each coefficient channel within the fitted mask.

    ``sigma`` is in voxels, scalar or per axis ``(x, y, z)``. The kernel is
    renormalized by the smoothed mask so edge voxels average only fitted
    neighbours. Delays are left unsmoothed.
    """
    s = _sigma_zyx(sigma)
    if not any(s):
        return cv.replace_alpha(cv.alpha.copy())
    m = cv.fitted.astype(float)
    den = gaussian_filter(m, s, mode="constant")
    out = np.full_like(cv.alpha, np.nan)
    ok = cv.fitted & (den > 0)
    for j in range(cv.J):
        a = np.where(cv.fitted, cv.alpha[..., j], 0.0)
        num = gaussian_filter(a, s, mode="constant")
        out[..., j][ok] = num[ok] / den[ok]
    return cv.replace_alpha(out)


@dataclass
class RegionEstimate:
    alpha: np.ndarray
    residue: object
    summary: KineticSummary
    n_voxels: int
    delay_spread: float


def _summary_matrix(basis: BasisSet, tau_v: float) -> np.ndarray:
    """(J, 5) member summaries K_B, V_B, K_D, V_D, K_i."""
    return np.array([kinetic_summary(m, tau_v).as_array()[:5] for m in basis.members])


def _with_extra(S: np.ndarray, n_extra: int) -> np.ndarray:
    """Extra blood columns contribute their coefficient to V_B only."""
    if n_extra == 0:
        return S
    E = np.zeros((n_extra, S.shape[1]))
    E[:, 1] = 1.0
    return np.vstack([S, E])


def _summaries(alpha, S):
    """Linear summaries plus the extraction fraction K_i / R(0)."""
    lin = alpha @ S
    r0 = lin[..., 0] + lin[..., 2] + lin[..., 4]
    with np.errstate(invalid="ignore", divide="ignore"):
        zeta = np.where(r0 != 0, lin[..., 4] / np.where(r0 != 0, r0, 1.0), 0.0)
    return lin, zeta


def region_average(cv: CoefficientVolume, region_mask, basis: BasisSet,
                   tau_v: float = DEFAULT_TAU_V) -> RegionEstimate:
    """Mean voxel coefficients over a region, with its residue and summary.

    Averaging coefficients is equivalent to fitting the averaged curve only
    when delays are (nearly) constant in the region; a spread larger than
    one grid step triggers a warning.
    """
    region = np.asarray(region_mask, dtype=bool) & cv.fitted
    if region.shape != cv.shape3:
        raise ValueError("region mask shape must match the volume grid")
    n = int(region.sum())
    if n == 0:
        raise ValueError("empty region")
    alpha = cv.alpha[region].mean(axis=0)
    d = cv.delay[region]
    spread = float(d.max() - d.min())
    step = float(np.min(np.diff(cv.delay_grid))) if cv.delay_grid.size > 1 else 0.0
    if spread > step + 1e-12:
        warnings.warn(f"delay spread {spread:.3g} min exceeds one grid step; "
                      "averaged coefficients may not match the averaged curve", stacklevel=2)
    J = basis.J
    res = mixture_residue(alpha[:J], basis, allow_negative=cv.mode == "unconstrained")
    lin, zeta = _summaries(alpha, _with_extra(_summary_matrix(basis, tau_v), cv.n_extra))
    summary = KineticSummary(*lin.tolist(), float(zeta))
    return RegionEstimate(alpha, res, summary, n, spread)


@dataclass(eq=False)
class ParametricImages:
    """One image per kinetic summary field plus fitted total uptake."""

    images: dict
    voxel_mm: tuple = (1.0, 1.0, 1.0)

    FIELDS = KineticSummary.FIELDS + ("total",)

    def __getitem__(self, name):
        return self.images[name]

    def stack(self) -> np.ndarray:
        return np.stack([self.images[f] for f in self.FIELDS], axis=-1)


def parametric_images(cv: CoefficientVolume, basis: BasisSet, tau_v: float = DEFAULT_TAU_V,
                      allow_unconstrained: bool = False) -> ParametricImages:
    """Kinetic summary images via linearity of the summaries in ``alpha``.

    Only the J member summaries are computed; every voxel's summary is then a
    matrix product. Unconstrained fits are refused unless explicitly allowed,
    since images assume nonnegative coefficients.
    """
    if cv.mode == "unconstrained" and not allow_unconstrained:
        raise ValueError("parametric images need constrained (nonnegative) coefficients")
    if cv.J != basis.J + cv.n_extra:
        raise ValueError(f"coefficient volume has {cv.J} channels, basis needs {basis.J + cv.n_extra}")
    S = _with_extra(_summary_matrix(basis, tau_v), cv.n_extra)
    lin, zeta = _summaries(cv.alpha, S)
    zeta = np.where(cv.fitted, zeta, np.nan)
    images = {f: lin[..., i] for i, f in enumerate(KineticSummary.FIELDS[:5])}
    images["zeta"] = zeta
    images["total"] = cv.total if cv.total is not None else np.full(cv.shape3, np.nan)
    return ParametricImages(images, cv.voxel_mm)
