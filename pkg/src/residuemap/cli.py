"""Command-line pipeline: simulate, segment, build-basis, map, roi, compare, study.

Every command writes into an output directory (``-o``), refuses to overwrite
existing outputs without ``--force``, and leaves a ``manifest.json`` with
input hashes, parameters, seed, tool version and the exact re-run line.
Worker count and log level come from ``RESIDUEMAP_WORKERS`` and
``RESIDUEMAP_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as rio
from .basis import BasisSet, build_basis, default_delay_grid
from .mapper import (DEFAULT_SIGMA, DELAY_WINDOW, MODES, CoefficientVolume, map_volume, parametric_images,
                     region_average, smooth_coefficients)
from .residue import DEFAULT_TAU_V, kinetic_summary
from .segmentation import DEFAULT_MAX_REGIONS, DEFAULT_TARGET, segment, segment_statistics

log = logging.getLogger("residuemap")

PIPELINE_ERRORS = (ValueError, KeyError, OSError, RuntimeError, np.linalg.LinAlgError)


@dataclass
class RunConfig:
    """Paths and parameters shared by the pipeline commands; flags mirror fields."""

    out: str
    volume: str | None = None
    input: str | None = None
    extra: list = field(default_factory=list)
    mask: str | None = None
    tau_v: float = DEFAULT_TAU_V
    K: int | None = None
    target: float = DEFAULT_TARGET
    max_regions: int = DEFAULT_MAX_REGIONS
    delay_max: float = 1.0
    delay_step: float = 2.0 / 60.0
    sigma: float = DEFAULT_SIGMA
    mode: str = "constrained"
    refit_delays: bool = False
    full_delay_search: bool = False
    seed: int = 0

    def validate(self):
        for name in ("volume", "input", "mask"):
            p = getattr(self, name)
            if p is not None and not rio.volume_paths(p)[0].exists() and not Path(p).exists():
                raise FileNotFoundError(f"{name} not found: {p}")
        for p in self.extra:
            if not Path(p).exists():
                raise FileNotFoundError(f"extra blood curve not found: {p}")
        if not self.tau_v > 0:
            raise ValueError("--tau-v must be > 0")
        if self.K is not None and self.K < 1:
            raise ValueError("--K must be >= 1")
        if not 0 <= self.target < 1:
            raise ValueError("--target must be in [0, 1)")
        if self.max_regions < 1:
            raise ValueError("--max-regions must be >= 1")
        if not (self.delay_max >= 0 and self.delay_step > 0):
            raise ValueError("delay grid needs --delay-max >= 0 and --delay-step > 0")
        if self.sigma < 0:
            raise ValueError("--sigma must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"--mode must be one of {MODES}")
        return self

    def delay_grid(self) -> np.ndarray:
        return default_delay_grid(self.delay_max, self.delay_step)

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in vars(args).items() if k in names and v is not None})


# --------------------------------------------------------------------------- helpers


class Outputs:
    """Collects output paths of one command and writes the manifest last."""

    def __init__(self, outdir, force: bool, argv=None):
        self.dir = Path(outdir)
        self.force = force
        self.argv = argv
        self.paths = []
        # fail before any work if the directory already holds a run
        rio.check_writable([self.dir / "manifest.json"], force)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        p = self.dir / name
        rio.check_writable([p], self.force)
        return p

    def volume(self, name, vol: rio.VolumeFile):
        self.paths.extend(rio.write_volume(self.dir / name, vol, self.force))

    def text(self, name, text: str):
        p = self.path(name)
        p.write_text(text)
        self.paths.append(p)

    def json(self, name, obj):
        self.text(name, rio.dumps_json(obj))

    def csv(self, name, header, rows):
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            wr.writerows(rows)
        self.paths.append(p)

    def manifest(self, command, inputs, parameters, seed=None):
        rio.write_manifest(self.dir, command, [Path(p) for p in inputs], parameters, seed,
                           argv=self.argv, outputs=self.paths)


def _inputs(*paths):
    out = []
    for p in paths:
        if p is None:
            continue
        hp, pp = rio.volume_paths(p)
        if hp.exists() and pp.exists():
            out += [hp, pp]
        else:
            out.append(Path(p))
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _residue_rows(residues, names, t_end, n=200):
    t = np.linspace(0.0, t_end, n + 1)
    vals = [r(t) for r in residues]
    return ["t"] + list(names), [[_fmt(ti)] + [_fmt(v[i]) for v in vals] for i, ti in enumerate(t)]


def _load_input(path):
    return rio.read_input_csv(path)


def _load_basis(path) -> BasisSet:
    return BasisSet.from_dict(json.loads(Path(path).read_text()))


def _extra_curves(paths):
    return tuple(rio.read_input_csv(p) for p in paths)


# --------------------------------------------------------------------------- commands


def cmd_simulate(args):
    out = Outputs(args.out, args.force, args.argv)
    if args.rois:
        from .sim import RoiStudyConfig, count_noise, roi_means
        from .presets import get_preset
        cfg = RoiStudyConfig(preset=args.preset, n_rois=args.n_rois, noise_cov=args.noise_cov,
                             seed=args.seed)
        p = get_preset(cfg.preset)
        rng = np.random.default_rng([cfg.seed, 2])
        y, _ = count_noise(roi_means(cfg, args.rois, cfg.n_rois, rng), cfg.noise_cov, rng)
        path = out.path("rois.csv")
        rio.write_roi_csv(path, p.schedule, y, force=True)
        out.paths.append(path)
        path = out.path("input.csv")
        rio.write_input_csv(path, p.input, force=True)
        out.paths.append(path)
        out.json("config.json", {"truth": args.rois, "decay": p.schedule.decay, **cfg.to_dict()})
        out.manifest("simulate", [], {"truth": args.rois, **cfg.to_dict()}, cfg.seed)
        return 0

    from .phantom import residue_truth, two_block_phantom
    shape = tuple(args.shape[::-1])  # given as nx ny nz
    ph = two_block_phantom(shape, args.noise_cov, args.seed, args.spread)
    vol = ph.volume
    out.volume("volume", rio.VolumeFile(vol.data, vol.voxel_mm, vol.schedule, value_units="counts"))
    path = out.path("input.csv")
    rio.write_input_csv(path, ph.input, force=True)
    out.paths.append(path)
    out.volume("truth_labels", rio.VolumeFile(ph.labels.astype(float), vol.voxel_mm, channels=["label"],
                                              meta={"K": 2}))
    out.volume("truth_alpha", rio.VolumeFile(ph.alpha, vol.voxel_mm, channels=list(ph.names)))
    out.volume("truth_delay", rio.VolumeFile(ph.delay, vol.voxel_mm, channels=["delay"]))
    blocks = []
    for k in range(2):
        r = residue_truth(ph, k)
        blocks.append({"block": k, "alpha": ph.block_alpha(k).tolist(),
                       "summary": kinetic_summary(r, args.tau_v).to_dict()})
    out.json("truth.json", {"members": [m.to_dict() for m in ph.members], "names": list(ph.names),
                            "scale": ph.scale, "tau_v": args.tau_v, "blocks": blocks})
    params = {"phantom": "two-block", "shape_xyz": list(args.shape), "noise_cov": args.noise_cov,
              "spread": args.spread, "tau_v": args.tau_v}
    out.manifest("simulate", [], params, args.seed)
    return 0


def cmd_segment(args):
    cfg = RunConfig.from_args(args).validate()
    out = Outputs(cfg.out, args.force, args.argv)
    vol = rio.read_dynamic(cfg.volume, cfg.mask)
    seg = segment(vol, cfg.K, cfg.target, cfg.max_regions)
    labels = seg.labels.astype(float)
    out.volume("labels", rio.VolumeFile(labels, vol.voxel_mm, channels=["label"],
                                        meta={"K": seg.K, "background_label": seg.K,
                                              "n_background": seg.n_background}))
    B = vol.n_frames
    rows = [[k, int(seg.sizes[k])] + [_fmt(v) for v in seg.means[k]] + [_fmt(v) for v in seg.variances[k]]
            for k in range(seg.K)]
    out.csv("segments.csv", ["segment", "size"] + [f"mean{b}" for b in range(B)]
            + [f"var{b}" for b in range(B)], rows)
    out.json("segments.json", {"K": seg.K, "explained": seg.explained, "n_background": seg.n_background,
                               "segments": seg.to_table(), "schedule": vol.schedule.to_dict()})
    out.manifest("segment", _inputs(cfg.volume, cfg.mask), asdict(cfg), cfg.seed)
    log.info("K = %d, explained %.4f", seg.K, seg.explained)
    return 0


def cmd_build_basis(args):
    cfg = RunConfig.from_args(args).validate()
    out = Outputs(cfg.out, args.force, args.argv)
    vol = rio.read_dynamic(cfg.volume, cfg.mask)
    lab = rio.read_volume(args.labels)
    labels = np.rint(lab.data[..., 0]).astype(np.int64)
    if labels.shape != vol.shape3:
        raise ValueError("label volume grid does not match the dynamic volume")
    K = int(lab.meta.get("K", labels.max() + 1))
    inp = _load_input(cfg.input)
    means, var, sizes = segment_statistics(vol, labels, K)
    keep = sizes > 0
    basis, fits = build_basis(means[keep], var[keep], inp, vol.schedule, delays=cfg.delay_grid(),
                              refit_delays=cfg.refit_delays)
    out.text("basis.json", basis.to_json() + "\n")
    tr = basis.trace
    out.csv("risk_trace.csv", ["J", "risk", "wrss", "penalty", "members", "best"],
            [[int(j), _fmt(e.risk), _fmt(e.wrss), _fmt(e.penalty), " ".join(map(str, e.members)),
              int(i == tr.best)] for i, (j, e) in enumerate(zip(tr.J, tr.entries))])
    header, rows = _residue_rows(basis.members, basis.names, basis.t_end)
    out.csv("basis_residues.csv", header, rows)
    header, rows = _residue_rows([f.residue for f in fits], [f"seg{k}" for k in range(len(fits))],
                                 vol.schedule.t_end)
    out.csv("segment_residues.csv", header, rows)
    out.manifest("build-basis", _inputs(cfg.volume, args.labels, cfg.input, cfg.mask), asdict(cfg),
                 cfg.seed)
    log.info("basis J = %d: %s", basis.J, ", ".join(basis.names))
    return 0


def coefficient_volume_file(cv: CoefficientVolume) -> rio.VolumeFile:
    data = np.concatenate([cv.alpha, cv.delay[..., None], cv.wrss[..., None],
                           (cv.total if cv.total is not None else np.full(cv.shape3, np.nan))[..., None],
                           (cv.flagged if cv.flagged is not None else np.zeros(cv.shape3))[..., None]],
                          axis=3)
    meta = {"mode": cv.mode, "n_extra": cv.n_extra, "n_coef": cv.J,
            "delay_grid": np.asarray(cv.delay_grid).tolist()}
    return rio.VolumeFile(data, cv.voxel_mm, channels=list(cv.names) + ["delay", "wrss", "total", "flagged"],
                          meta=meta)


def read_coefficients(path) -> CoefficientVolume:
    vf = rio.read_volume(path)
    m = vf.meta
    if "n_coef" not in m:
        raise rio.VolumeFormatError(f"{path}: not a coefficient volume")
    J = int(m["n_coef"])
    d = vf.data.astype(float)
    alpha = d[..., :J]
    fitted = ~np.isnan(alpha).any(axis=3)
    return CoefficientVolume(alpha, d[..., J], d[..., J + 1], fitted, tuple(vf.channels[:J]), m["mode"],
                             np.asarray(m["delay_grid"], dtype=float), vf.voxel_mm, int(m["n_extra"]),
                             d[..., J + 2], d[..., J + 3] > 0)


def cmd_map(args):
    from .diagnostics import fitted_curves, rms_maps
    cfg = RunConfig.from_args(args).validate()
    out = Outputs(cfg.out, args.force, args.argv)
    vol = rio.read_dynamic(cfg.volume, cfg.mask)
    basis = _load_basis(args.basis)
    inp = _load_input(cfg.input)
    extra = _extra_curves(cfg.extra)
    fm = basis.frame_model(inp, vol.schedule, cfg.delay_grid(), extra)
    cv = map_volume(vol, basis, inp, mode=cfg.mode, extra_curves=extra, frame_model=fm,
                    delay_window=None if cfg.full_delay_search else DELAY_WINDOW)
    out.volume("coefficients", coefficient_volume_file(cv))
    sm = smooth_coefficients(cv, cfg.sigma)
    out.volume("coefficients_smoothed", coefficient_volume_file(sm))
    if cfg.mode == "constrained":
        img = parametric_images(sm, basis, cfg.tau_v)
        out.volume("parametric", rio.VolumeFile(img.stack(), cv.voxel_mm, channels=list(img.FIELDS)))
    fit = fitted_curves(cv, fm)
    res_rms, data_rms = rms_maps(vol.data, fit, mask=cv.fitted)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(data_rms > 0, res_rms / data_rms, np.nan)
    out.volume("diagnostics", rio.VolumeFile(np.stack([res_rms, data_rms, ratio], axis=3), cv.voxel_mm,
                                             channels=["residual_rms", "data_rms", "ratio"]))
    out.json("map_summary.json", {"n_fitted": cv.n_fitted, "n_flagged": cv.n_flagged,
                                  "basis": list(basis.names), "mode": cfg.mode,
                                  "median_ratio": float(np.nanmedian(ratio)) if cv.n_fitted else None})
    out.manifest("map", _inputs(cfg.volume, args.basis, cfg.input, cfg.mask, *cfg.extra), asdict(cfg),
                 cfg.seed)
    return 0


def _box_mask(shape3, box):
    x0, x1, y0, y1, z0, z1 = box
    m = np.zeros(shape3, bool)
    m[z0:z1, y0:y1, x0:x1] = True
    if not m.any():
        raise ValueError(f"box {box} selects no voxels")
    return m


def cmd_roi(args):
    out = Outputs(args.out, args.force, args.argv)
    cv = read_coefficients(args.coefficients)
    basis = _load_basis(args.basis)
    if args.mask is not None:
        mv = rio.read_volume(args.mask)
        region = mv.data[..., 0]
        region = region == args.label if args.label is not None else region > 0
    elif args.box is not None:
        region = _box_mask(cv.shape3, args.box)
    else:
        raise ValueError("give --mask or --box")
    est = region_average(cv, region, basis, args.tau_v)
    out.json("residue.json", {"residue": est.residue.to_dict(), "alpha": est.alpha.tolist(),
                              "names": list(cv.names), "n_voxels": est.n_voxels,
                              "delay_spread": est.delay_spread, "summary": est.summary.to_dict()})
    out.csv("summary.csv", ["field", "value"], [[k, _fmt(v)] for k, v in est.summary.to_dict().items()])
    header, rows = _residue_rows([est.residue], ["R"], est.residue.t_end)
    out.csv("residue.csv", header, rows)
    params = {"tau_v": args.tau_v, "box": args.box, "label": args.label}
    out.manifest("roi", _inputs(args.coefficients, args.basis, args.mask), params)
    return 0


def cmd_compare(args):
    from .diagnostics import compare_cv, compartment_fitter, mixture_fitter
    from .sim import roi_weights
    out = Outputs(args.out, args.force, args.argv)
    inp = _load_input(args.input)
    sch, Y, names = rio.read_roi_csv(args.rois, args.decay)
    basis = _load_basis(args.basis)
    delays = default_delay_grid(args.delay_max, args.delay_step)
    extra = _extra_curves(args.extra or [])
    fa = mixture_fitter(basis, inp, sch, delays, extra)
    rates = np.geomspace(args.rates[0], args.rates[1], int(args.rates[2]))
    fb = compartment_fitter(args.model, inp, sch, delays, rates, blood=not args.no_blood)
    res = compare_cv(Y, roi_weights(Y), fa, fb)
    rep = {"model_a": "mixture", "model_b": args.model, "wins_mixture": res.wins_a, "n": res.n,
           "win_rate": res.win_rate, "sign_p": res.sign_p, "sign_p_greater": res.sign_p_greater}
    out.json("comparison.json", rep)
    out.csv("cv.csv", ["roi", "cv_mixture", "cv_compartment", "wilcoxon_p"],
            [[n, _fmt(a), _fmt(b), _fmt(p)] for n, a, b, p in zip(names, res.cv_a, res.cv_b, res.wilcoxon_p)])
    params = {"model": args.model, "rates": list(args.rates), "blood": not args.no_blood,
              "delay_max": args.delay_max, "delay_step": args.delay_step, "decay": args.decay}
    out.manifest("compare", _inputs(args.rois, args.basis, args.input, *(args.extra or [])), params)
    print(f"mixture wins {res.wins_a}/{res.n}, sign test p = {res.sign_p:.4g}")
    return 0


def cmd_study(args):
    from .sim import (TARGETS, RoiStudyConfig, SimConfig, fit_dose_regression, run_roi_comparison,
                      run_study)
    conf = json.loads(Path(args.config).read_text()) if args.config else {"preset": args.preset}
    if args.seed is not None:
        conf["seed"] = args.seed
    out = Outputs(args.out, args.force, args.argv)
    inputs = [args.config] if args.config else []
    if conf.get("kind") == "roi-comparison":
        conf.pop("kind")
        truth = conf.pop("truth", "mixture")
        n_batches = int(conf.pop("batches", 1))
        cfg = RoiStudyConfig.from_dict(conf)
        res = run_roi_comparison(cfg, truth, n_batches)
        out.json("comparison.json", {**res.to_dict(), "n_significant": res.n_significant()})
        out.json("config.json", {"kind": "roi-comparison", "truth": truth, "batches": n_batches,
                                 **cfg.to_dict()})
        out.manifest("study", inputs, cfg.to_dict(), cfg.seed)
        print(f"{res.n_significant()} of {n_batches} batches significant at 0.05")
        return 0
    if args.replicates is not None:
        conf["replicates"] = args.replicates
    cfg = SimConfig.from_dict(conf)
    log.info("study %s: %d replicates, doses %s", cfg.preset.name, cfg.replicates, cfg.doses)
    res = run_study(cfg)
    out.text("mse_table.csv", res.table.to_csv())
    regs = {}
    for t in TARGETS:
        try:
            regs[t] = fit_dose_regression(res.table, t).to_dict()
        except ValueError as e:
            regs[t] = {"error": str(e)}
    out.json("regression.json", {"failures": res.table.failures, "targets": regs})
    out.json("config.json", cfg.to_dict())
    out.manifest("study", inputs, cfg.to_dict(), cfg.seed)
    r = regs["residue"]
    if "gamma_a" in r:
        print(f"residue: gamma_a = {r['gamma_a']:.3f} +- {r['gamma_a_se']:.3f}, "
              f"gamma_M = {r['gamma_M']:.3f}, adj R^2 = {r['r2_adj']:.3f}")
    return 0


# --------------------------------------------------------------------------- parser


def _common(p, volume=True):
    if volume:
        p.add_argument("volume", help="dynamic volume (header .json or stem)")
        p.add_argument("--mask", help="one-channel mask volume (nonzero = inside)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _delay_args(p):
    p.add_argument("--delay-max", type=float, default=1.0, help="largest delay on the grid (min)")
    p.add_argument("--delay-step", type=float, default=2.0 / 60.0, help="delay grid step (min)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="residuemap", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"residuemap {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="two-block phantom volume or synthetic ROI curves")
    _common(p, volume=False)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 32, 8], metavar=("NX", "NY", "NZ"))
    p.add_argument("--noise-cov", type=float, default=None,
                   help="peak-frame CoV (phantom default 0.003, ROI default 0.05)")
    p.add_argument("--spread", type=float, default=0.3, help="amplitude field spread")
    p.add_argument("--tau-v", type=float, default=DEFAULT_TAU_V)
    p.add_argument("--rois", choices=("mixture", "1c"), help="write synthetic ROI curves instead")
    p.add_argument("--n-rois", type=int, default=100)
    p.add_argument("--preset", default="fdg")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("segment", help="split-and-merge segmentation")
    _common(p)
    p.add_argument("--K", type=int, help="number of segments (default: from --target)")
    p.add_argument("--target", type=float, default=DEFAULT_TARGET, help="explained-variance target")
    p.add_argument("--max-regions", type=int, default=DEFAULT_MAX_REGIONS)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build-basis", help="segment residues, candidate pool, backward elimination")
    _common(p)
    p.add_argument("--labels", required=True, help="label volume from 'segment'")
    p.add_argument("--input", required=True, help="arterial input CSV (t,value)")
    p.add_argument("--refit-delays", action="store_true", help="refit segment delays per subset")
    _delay_args(p)
    p.set_defaults(func=cmd_build_basis)

    p = sub.add_parser("map", help="voxel fits, smoothing, parametric images, diagnostics")
    _common(p)
    p.add_argument("--basis", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--extra", action="append", default=[], help="extra blood curve CSV (repeatable)")
    p.add_argument("--mode", choices=MODES, default="constrained")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="smoothing sigma (voxels)")
    p.add_argument("--tau-v", type=float, default=DEFAULT_TAU_V)
    p.add_argument("--full-delay-search", action="store_true",
                   help="iterate at every grid delay instead of a window around the screened best")
    _delay_args(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("roi", help="regional residue and summary from coefficients")
    p.add_argument("coefficients", help="coefficient volume from 'map'")
    p.add_argument("--basis", required=True)
    p.add_argument("--mask", help="region volume (nonzero, or == --label)")
    p.add_argument("--label", type=int)
    p.add_argument("--box", type=int, nargs=6, metavar=("X0", "X1", "Y0", "Y1", "Z0", "Z1"))
    p.add_argument("--tau-v", type=float, default=DEFAULT_TAU_V)
    _common(p, volume=False)
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("compare", help="leave-one-out CV: mixture vs compartment model")
    p.add_argument("rois", help="ROI table CSV (t_start,t_end,roi...)")
    p.add_argument("--basis", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--model", choices=("1c", "2c"), default="2c")
    p.add_argument("--rates", type=float, nargs=3, default=[0.02, 2.0, 64], metavar=("LO", "HI", "N"))
    p.add_argument("--no-blood", action="store_true")
    p.add_argument("--extra", action="append", default=[])
    p.add_argument("--decay", type=float, default=0.0, help="decay constant (1/min) of the frames")
    _delay_args(p)
    _common(p, volume=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("study", help="dose-MSE simulation study or ROI comparison study")
    p.add_argument("config", nargs="?", help="study config JSON")
    p.add_argument("--preset", default="fdg")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    _common(p, volume=False)
    p.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RESIDUEMAP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = build_parser().parse_args(argv)
    args.argv = argv
    if args.command == "simulate" and args.noise_cov is None:
        args.noise_cov = 0.05 if args.rois else 0.003
    try:
        return args.func(args)
    except PIPELINE_ERRORS as e:
        print(f"residuemap {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
