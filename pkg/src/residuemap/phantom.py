"""Two-block phantom: left half one residue shape, right half another.

Each voxel residue is ``s(x) R_block`` with a smooth positive amplitude field
``s``, so the scaled curve shape is constant within a block while the
coefficients vary voxel to voxel. Noise is count-like: each curve is scaled
so the peak frame of a unit-amplitude voxel has the requested CoV and the
variance equals the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import step_knots
from .presets import fdg_input, fdg_schedule, step_shape, vascular_shape
from .residue import MixtureResidue, Residue, patlak_residue
from .segmentation import DynamicVolume
from .timecore import FrameSchedule, InputFunction, model_frame_matrix

DEFAULT_SHAPE = (8, 32, 32)  # (nz, ny, nx)
BLOCK_ALPHAS = np.array([[0.05, 0.05, 0.050],
                         [0.03, 0.10, 0.008]])  # V_B, K_D, K_i per block
BLOCK_DELAYS = np.array([0.1, 0.2])  # on the 2 s grid


@dataclass(eq=False)
class Phantom:
    volume: DynamicVolume
    input: InputFunction
    labels: np.ndarray  # (nz, ny, nx) block index
    alpha: np.ndarray  # (nz, ny, nx, J) truth coefficients on ``members``
    delay: np.ndarray  # (nz, ny, nx)
    members: tuple
    names: tuple
    scale: float  # counts per unit of model mean

    @property
    def schedule(self) -> FrameSchedule:
        return self.volume.schedule

    def block_alpha(self, k: int) -> np.ndarray:
        return self.alpha[self.labels == k].mean(axis=0)

    def coefficients_on(self, basis, n: int = 4001) -> np.ndarray:
        """Truth coefficients re-expressed on another basis by L2 projection.

        Exact when every truth residue lies in the span of ``basis``.
        """
        t = np.linspace(0.0, self.schedule.t_end, n)
        T = np.column_stack([m(t) for m in self.members])
        Bm = np.column_stack([m(t) for m in getattr(basis, "members", basis)])
        P, *_ = np.linalg.lstsq(Bm, T, rcond=None)  # (J_basis, J_truth)
        return self.alpha @ P.T


def amplitude_field(shape, spread: float = 0.3) -> np.ndarray:
    """Smooth field ``1 + spread * sin * cos`` with mean close to 1."""
    nz, ny, nx = shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return 1.0 + spread * np.sin(2 * np.pi * x / max(nx, 2) * 2) * np.cos(np.pi * y / max(ny, 2)) \
        * (0.5 + 0.5 * np.cos(np.pi * z / max(nz, 2)))


def phantom_members(schedule: FrameSchedule):
    """Vascular, distribution and Patlak members on the basis-builder knots."""
    te = schedule.t_end
    knots = step_knots(schedule)
    dist = step_shape(lambda s: 0.5 * np.exp(-0.15 * s) + 0.5 * np.exp(-0.8 * s), knots, te)
    return (vascular_shape(knots, te), dist, patlak_residue(te)), ("vascular", "distribution",
                                                                    "patlak"), knots


def two_block_phantom(shape=DEFAULT_SHAPE, noise_cov: float = 0.003, seed: int = 0,
                      spread: float = 0.3, schedule: FrameSchedule | None = None,
                      input: InputFunction | None = None) -> Phantom:
    """Left half (x < nx/2) block 0, right half block 1."""
    sch = fdg_schedule() if schedule is None else schedule
    inp = fdg_input(sch.t_end) if input is None else input
    members, names, knots = phantom_members(sch)
    nz, ny, nx = shape
    labels = np.zeros(shape, dtype=np.int64)
    labels[:, :, nx // 2:] = 1
    blk = BLOCK_ALPHAS.copy()
    blk[:, 0] /= knots[1]  # vascular member is an indicator of the first knot interval
    s = amplitude_field(shape, spread)
    alpha = s[..., None] * blk[labels]
    delay = BLOCK_DELAYS[labels]
    fm = model_frame_matrix(list(members), inp, sch, BLOCK_DELAYS)
    mu = np.einsum("zyxbj,zyxj->zyxb", fm.matrix[labels], alpha)
    peak = float(max((fm.matrix[k] @ blk[k]).max() for k in range(2)))
    scale = 1.0 / (noise_cov**2 * peak) if noise_cov > 0 else 1.0
    rng = np.random.default_rng(seed)
    m = mu * scale
    y = m + np.sqrt(np.maximum(m, 0.0)) * rng.standard_normal(m.shape) if noise_cov > 0 else m
    vol = DynamicVolume(y, sch, (2.0, 2.0, 2.0))
    return Phantom(vol, inp, labels, alpha * scale, delay, members, names, scale)


def residue_truth(phantom: Phantom, k: int) -> Residue:
    """Mean residue of block ``k`` in data units."""
    return MixtureResidue(list(phantom.members), phantom.block_alpha(k).tolist())
