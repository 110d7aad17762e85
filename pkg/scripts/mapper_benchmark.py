"""Voxel-mapping throughput on a synthetic 42-frame water-like study.

Five-member basis (four exponentials plus Patlak), 31-point delay grid,
count noise. Reports fits per second for the windowed and the full delay
search.

    python3 scripts/mapper_benchmark.py --voxels 20000
"""

import argparse
import time

import numpy as np

from residuemap.basis import BasisSet, default_delay_grid
from residuemap.mapper import map_volume
from residuemap.nnls import fit_batch
from residuemap.residue import ExponentialResidue, patlak_residue
from residuemap.segmentation import DynamicVolume
from residuemap.timecore import DECAY_O15, FrameSchedule, InputFunction


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--voxels", type=int, default=20000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    d = np.array([60] + [3] * 5 + [6] * 10 + [10] * 12 + [15] * 8 + [20] * 6) / 60.0
    sch = FrameSchedule.from_durations(d, decay=DECAY_O15)
    t = np.linspace(0, sch.t_end, 600)
    inp = InputFunction(t, np.where(t > 1.1, (t - 1.1) ** 2 * np.exp(-(t - 1.1) / 0.15) * 200, 0.0))
    members = [ExponentialResidue([1.0], [k], sch.t_end) for k in (0.3, 1.0, 3.0, 8.0)]
    basis = BasisSet(members + [patlak_residue(sch.t_end)], ["e1", "e2", "e3", "e4", "patlak"],
                     [0, 1, 2, 3, "patlak"])
    grid = default_delay_grid(1.0)
    fm = basis.frame_model(inp, sch, grid)

    rng = np.random.default_rng(args.seed)
    shape = (1, 1, args.voxels)
    a = rng.uniform(0, 1, shape + (5,)) * np.array([1, 1, 1, 1, 0.05])
    mu = np.einsum("zyxbj,zyxj->zyxb", fm.matrix[rng.integers(0, grid.size, shape)], a) * 1e3
    vol = DynamicVolume(mu + np.sqrt(np.maximum(mu, 0.0)) * rng.standard_normal(mu.shape), sch)
    fit_batch(vol.data.reshape(-1, sch.n_frames)[:4], fm)

    print(f"B={sch.n_frames}, J={basis.J}, {grid.size} delays, {args.voxels} voxels, {args.workers} worker(s)")
    for label, window in (("windowed", 3), ("full", None)):
        t0 = time.perf_counter()
        map_volume(vol, basis, inp, frame_model=fm, workers=args.workers, delay_window=window)
        dt = time.perf_counter() - t0
        print(f"  {label:>8} delay search: {args.voxels / dt / args.workers:,.0f} fits/s/worker")


if __name__ == "__main__":
    main()
