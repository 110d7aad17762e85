"""Residual diagnostics and leave-one-out model comparison.

Fitters are callables ``fitter(Y, W) -> mu`` that fit every row of ``Y``
with the matching row of weights ``W`` and return fitted frame means. Leave-one-out
then amounts to one batched call with a zero weight on the held-out frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .nnls import WEIGHT_FLOOR, fit_batch
from .residue import patlak_residue
from .timecore import (FrameModel, FrameSchedule, InputFunction, exp_convolution_frames,
                       model_frame_matrix)

EXACT_MAX_N = 25


# --------------------------------------------------------------------------- residuals


def _floored_weights(Y, fitted, floor_frac=WEIGHT_FLOOR):
    eps = floor_frac * np.max(np.abs(Y), axis=-1, keepdims=True)
    eps = np.where(eps > 0, eps, 1.0)
    return 1.0 / np.maximum(fitted, eps)


def standardized_residuals(Y, fitted, floor_frac: float = WEIGHT_FLOOR) -> np.ndarray:
    """``r_b = sqrt(w_b) (y_b - yhat_b)`` with ``w_b = 1/max(yhat_b, eps)``.

    Works on any array whose last axis is frames; ``eps`` is the solver's
    floor ``floor_frac * max|y|`` per curve.
    """
    Y = np.asarray(Y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    return np.sqrt(_floored_weights(Y, fitted, floor_frac)) * (Y - fitted)


def common_weights(Y, mask=None) -> np.ndarray:
    """Inverse frame-mean activity over the mask, floored like the solver."""
    Y = np.asarray(Y, dtype=float)
    flat = Y.reshape(-1, Y.shape[-1])
    if mask is not None:
        flat = flat[np.asarray(mask, bool).ravel()]
    ybar = np.nanmean(flat, axis=0)
    eps = WEIGHT_FLOOR * np.max(np.abs(ybar)) if np.any(ybar != 0) else 1.0
    return 1.0 / np.maximum(ybar, eps)


def rms_maps(Y, fitted, weights=None, mask=None):
    """RMS of weighted residuals and of weighted data about its mean, per voxel.

    A common set of frame weights (default :func:`common_weights`) makes the
    two maps comparable across voxels.
    """
    Y = np.asarray(Y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    w = common_weights(Y, mask) if weights is None else np.asarray(weights, dtype=float)
    B = Y.shape[-1]
    res = np.sqrt(np.sum(w * (Y - fitted) ** 2, axis=-1) / B)
    ybar = np.sum(w * Y, axis=-1, keepdims=True) / np.sum(w)
    dat = np.sqrt(np.sum(w * (Y - ybar) ** 2, axis=-1) / B)
    if mask is not None:
        m = np.asarray(mask, bool)
        res = np.where(m, res, np.nan)
        dat = np.where(m, dat, np.nan)
    return res, dat


def fitted_curves(cv, frame_model: FrameModel) -> np.ndarray:
    """Fitted frame means ``(nz, ny, nx, B)`` of a coefficient volume; NaN where unfitted."""
    out = np.full(cv.shape3 + (frame_model.n_frames,), np.nan)
    m = cv.fitted
    d = np.searchsorted(frame_model.delays, cv.delay[m] - 1e-9)
    out[m] = np.einsum("vbj,vj->vb", frame_model.matrix[d], cv.alpha[m])
    return out


# --------------------------------------------------------------------------- fitters


class FrameModelFitter:
    """Weighted (NN)LS fit over a frame model with grid search on its first axis.

    The first axis is usually delay, but any finite parameter grid works
    (compartmental rates times delays, for instance). Weights are held fixed.
    """

    def __init__(self, frame_model: FrameModel, nonneg: bool = True, labels=None, kind: str = "mixture",
                 blood: bool = False):
        self.model = frame_model
        self.nonneg = nonneg
        self.labels = labels
        self.kind = kind
        self.blood = blood

    @property
    def is_linear(self) -> bool:
        return not self.nonneg and self.model.n_delays == 1

    @property
    def design(self) -> np.ndarray:
        return self.model.matrix[0]

    def fit(self, Y, W):
        return fit_batch(np.atleast_2d(Y), self.model, weights0=np.atleast_2d(W), nonneg=self.nonneg,
                         max_iter=1)

    def __call__(self, Y, W) -> np.ndarray:
        f = self.fit(Y, W)
        return np.einsum("vbj,vj->vb", self.model.matrix[f.delay_index], f.coef)


def mixture_fitter(basis, input: InputFunction, schedule: FrameSchedule, delays,
                   extra_curves=()) -> FrameModelFitter:
    fm = model_frame_matrix(basis, input, schedule, delays, extra_curves)
    return FrameModelFitter(fm, labels=[(None, float(d)) for d in fm.delays], blood=bool(extra_curves))


DEFAULT_RATES = np.geomspace(0.01, 5.0, 48)


def compartment_fitter(model: str, input: InputFunction, schedule: FrameSchedule, delays,
                       rates=None, blood: bool = True) -> FrameModelFitter:
    """1- or irreversible 2-compartment fit, profiled over a rate grid.

    For a fixed total rate ``k`` the model is linear:

    * ``"1c"``: ``K1 e^{-k t}``, so ``k = k2``;
    * ``"2c"``: ``a + b e^{-k t}`` with ``a = K1 k3/k``, ``b = K1 k2/k``
      and ``k = k2 + k3``, both coefficients nonnegative.

    ``blood=True`` adds an unconvolved blood column (V_B). The grid is the
    product of ``rates`` and ``delays``; ``labels[i]`` is ``(k, delay)``.
    """
    if model not in ("1c", "2c"):
        raise ValueError("model must be '1c' or '2c'")
    rates = DEFAULT_RATES if rates is None else np.asarray(rates, dtype=float)
    delays = np.asarray(delays, dtype=float)
    te = schedule.t_end
    E = exp_convolution_frames(input, schedule, rates, delays)  # (B, R, D)
    fixed = [patlak_residue(te)] if model == "2c" else []
    F = model_frame_matrix(fixed, input, schedule, delays, (input,) if blood else ()).matrix  # (D, B, f)
    blocks, labels = [], []
    for i, k in enumerate(rates):
        blocks.append(np.concatenate([E[:, i, :].T[:, :, None], F], axis=2))
        labels += [(float(k), float(d)) for d in delays]
    M = np.concatenate(blocks, axis=0)
    return FrameModelFitter(FrameModel(np.arange(M.shape[0], dtype=float), M), True, labels, model, blood)


def compartment_parameters(fitter: FrameModelFitter, coef, index) -> dict:
    """Map a compartment-fitter solution back to K1, k2, k3, V_B and delay."""
    if fitter.kind not in ("1c", "2c"):
        raise ValueError("not a compartment fitter")
    k, delay = fitter.labels[int(index)]
    coef = np.asarray(coef, dtype=float)
    b = float(coef[0])
    a = float(coef[1]) if fitter.kind == "2c" else 0.0
    K1 = a + b
    return {"K1": K1, "k2": k * b / K1 if K1 > 0 else k, "k3": k * a / K1 if K1 > 0 else 0.0,
            "V_B": float(coef[-1]) if fitter.blood else 0.0, "delay": delay}


# --------------------------------------------------------------------------- cross-validation


@dataclass
class CvResult:
    residuals: np.ndarray  # weighted prediction residuals, NaN on failed folds
    wss: float
    failed: list


def _leverage_cv(X, y, w):
    sw = np.sqrt(w)
    A = X * sw[:, None]
    Q, _ = np.linalg.qr(A)
    h = np.sum(Q * Q, axis=1)
    beta = np.linalg.lstsq(A, y * sw, rcond=None)[0]
    r = sw * (y - X @ beta)
    return r / (1.0 - h)


def loo_cv(y, fitter, weights) -> CvResult:
    """Leave-one-out weighted prediction residuals ``sqrt(w_b) (y_b - yhat_(-b), b)``.

    Fitters that are linear (unconstrained, single design) use the leverage
    identity; all others are refitted once per held-out frame, in one batch.
    Folds whose refit fails or is non-finite are flagged and excluded.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    B = y.size
    if w.shape != (B,):
        raise ValueError("weights must match the curve length")
    if getattr(fitter, "is_linear", False):
        r = _leverage_cv(fitter.design, y, w)
    else:
        W = np.tile(w, (B, 1))
        np.fill_diagonal(W, 0.0)
        try:
            mu = np.asarray(fitter(np.tile(y, (B, 1)), W), dtype=float)
            pred = np.diagonal(mu)
        except (ValueError, np.linalg.LinAlgError):
            pred = np.full(B, np.nan)
        r = np.sqrt(w) * (y - pred)
    bad = ~np.isfinite(r)
    r = np.where(bad, np.nan, r)
    return CvResult(r, float(np.nansum(r * r)), [int(b) for b in np.flatnonzero(bad)])


# --------------------------------------------------------------------------- tests


@dataclass
class StatResult:
    statistic: float
    pvalue: float
    n: int


def _signed_rank_exact_cdf(ranks2):
    """P(T+ <= t) under the null, ranks given doubled (integers, midranks allowed)."""
    total = int(sum(ranks2))
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in ranks2:
        r = int(r)
        nxt = dist.copy()
        nxt[r:] += dist[: total + 1 - r]
        dist = nxt
    dist /= dist.sum()
    cdf = np.cumsum(dist)
    return cdf, total


def wilcoxon_paired(a, b) -> StatResult:
    """Two-sided Wilcoxon signed-rank test on the differences ``a - b``.

    Zero differences are dropped. The null distribution is exact (midranks
    included) for up to 25 nonzero differences, otherwise the normal
    approximation with continuity and tie corrections. ``statistic`` is the
    positive rank sum.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return StatResult(0.0, 1.0, 0)
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        r2 = np.rint(2 * ranks).astype(int)
        cdf, _ = _signed_rank_exact_cdf(r2)
        t2 = int(round(2 * t_plus))
        lo = cdf[t2]
        hi = 1.0 - (cdf[t2 - 1] if t2 > 0 else 0.0)
        p = min(1.0, 2.0 * min(lo, hi))
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
        if var <= 0:
            return StatResult(t_plus, 1.0, n)
        z = (abs(t_plus - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))
    return StatResult(t_plus, float(p), n)


def _binom_cdf(k, n):
    if k < 0:
        return 0.0
    return float(sum(math.comb(n, i) for i in range(0, min(k, n) + 1)) / 2.0**n)


def sign_test(wins: int, n: int, alternative: str = "two-sided") -> StatResult:
    """Exact binomial sign test of ``wins`` out of ``n`` against p = 1/2."""
    if n < 1 or not (0 <= wins <= n):
        raise ValueError("need n >= 1 and 0 <= wins <= n")
    upper = 1.0 - _binom_cdf(wins - 1, n)
    lower = _binom_cdf(wins, n)
    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    elif alternative == "two-sided":
        p = min(1.0, 2.0 * min(upper, lower))
    else:
        raise ValueError("alternative must be 'two-sided', 'greater' or 'less'")
    return StatResult(float(wins), float(p), int(n))


@dataclass
class CvComparison:
    """Per-curve CV sums for methods A and B with paired and overall tests."""

    cv_a: np.ndarray
    cv_b: np.ndarray
    wilcoxon_p: np.ndarray
    wins_a: int
    n: int
    sign_p: float
    sign_p_greater: float

    @property
    def win_rate(self) -> float:
        return self.wins_a / self.n if self.n else float("nan")

    def to_dict(self) -> dict:
        return {"cv_a": self.cv_a.tolist(), "cv_b": self.cv_b.tolist(),
                "wilcoxon_p": self.wilcoxon_p.tolist(), "wins_a": self.wins_a, "n": self.n,
                "sign_p": self.sign_p, "sign_p_greater": self.sign_p_greater}


def compare_cv(curves, weights, fitter_a, fitter_b) -> CvComparison:
    """Leave-one-out comparison of two fitters on each curve.

    Per curve, the absolute CV residuals of A and B are compared with the
    paired Wilcoxon test. Over curves, A "wins" when its CV sum of squares is
    lower; ties count for neither and are dropped from the sign test.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    weights = np.broadcast_to(np.asarray(weights, dtype=float), curves.shape)
    n = curves.shape[0]
    cva, cvb, pw = np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        ra = loo_cv(curves[i], fitter_a, weights[i])
        rb = loo_cv(curves[i], fitter_b, weights[i])
        ok = np.isfinite(ra.residuals) & np.isfinite(rb.residuals)
        cva[i] = float(np.sum(ra.residuals[ok] ** 2))
        cvb[i] = float(np.sum(rb.residuals[ok] ** 2))
        pw[i] = wilcoxon_paired(np.abs(ra.residuals[ok]), np.abs(rb.residuals[ok])).pvalue
    wins = int(np.sum(cva < cvb))
    decided = int(np.sum(cva != cvb))
    if decided == 0:
        return CvComparison(cva, cvb, pw, wins, n, 1.0, 1.0)
    return CvComparison(cva, cvb, pw, wins, n, sign_test(wins, decided).pvalue,
                        sign_test(wins, decided, "greater").pvalue)
