"""File formats: raw float32 volumes with JSON sidecars, CSV curves and run
manifests.

A volume ``name`` is stored as ``name.json`` (header) plus ``name.f32``
(payload of little-endian float32, channel-major then z, y, x with x
fastest). Dynamic volumes have one channel per frame and carry the frame
schedule; other volumes (labels, coefficients, images) name their channels.
Minutes are the canonical time unit; headers in seconds must say so in
``units.time``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segmentation import DynamicVolume
from .timecore import FrameSchedule, InputFunction

FORMAT = "residuemap-volume"
FORMAT_VERSION = 1
PAYLOAD_SUFFIX = ".f32"
HEADER_SUFFIX = ".json"
_DTYPE = np.dtype("<f4")
TIME_SCALE = {"min": 1.0, "s": 1.0 / 60.0}


class VolumeFormatError(ValueError):
    pass


def _version() -> str:
    from . import __version__
    return __version__


def volume_paths(path) -> tuple:
    """``(header, payload)`` paths for a volume name with or without suffix."""
    p = Path(path)
    if p.suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        p = p.with_suffix("")
    return p.with_name(p.name + HEADER_SUFFIX), p.with_name(p.name + PAYLOAD_SUFFIX)


def check_writable(paths, force: bool = False):
    """Refuse to overwrite existing files unless ``force``."""
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")


@dataclass(eq=False)
class VolumeFile:
    """In-memory volume: ``data[z, y, x, c]`` plus header fields."""

    data: np.ndarray
    voxel_mm: tuple = (1.0, 1.0, 1.0)
    schedule: FrameSchedule | None = None
    channels: list | None = None
    value_units: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise VolumeFormatError("volume data must be 3-D or 4-D (nz, ny, nx[, C])")
        C = self.data.shape[3]
        if self.schedule is not None and self.schedule.n_frames != C:
            raise VolumeFormatError(f"{C} channels but {self.schedule.n_frames} frames in the schedule")
        if self.channels is not None and len(self.channels) != C:
            raise VolumeFormatError(f"{C} channels but {len(self.channels)} channel names")
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape[:3]
        return (nx, ny, nz)

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    def header(self, payload_name: str) -> dict:
        h = {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "dims": list(self.dims),
            "channels": self.n_channels,
            "channel_names": self.channels,
            "voxel_mm": list(self.voxel_mm),
            "frames": None,
            "lambda": None,
            "units": {"time": "min", "value": self.value_units},
            "payload": payload_name,
            "dtype": "float32",
            "byteorder": "little",
            "order": "channel, z, y, x (x fastest)",
            "meta": self.meta,
        }
        if self.schedule is not None:
            h["frames"] = [[float(a), float(b)] for a, b in zip(self.schedule.starts, self.schedule.ends)]
            h["lambda"] = self.schedule.decay
        return h

    def channel(self, name: str) -> np.ndarray:
        if not self.channels or name not in self.channels:
            raise KeyError(f"no channel {name!r}")
        return self.data[..., self.channels.index(name)]

    def to_dynamic(self, mask=None) -> DynamicVolume:
        if self.schedule is None:
            raise VolumeFormatError("volume has no frame schedule")
        return DynamicVolume(self.data.astype(float), self.schedule, self.voxel_mm, mask)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_volume(path, vol: VolumeFile, force: bool = False) -> tuple:
    """Write header and payload; returns their paths."""
    hp, pp = volume_paths(path)
    check_writable([hp, pp], force)
    hp.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(np.moveaxis(vol.data, 3, 0), dtype=_DTYPE)
    with open(pp, "wb") as fh:
        fh.write(payload.tobytes())
    hp.write_text(dumps_json(vol.header(pp.name)))
    return hp, pp


def _schedule_from_header(h) -> FrameSchedule | None:
    frames = h.get("frames")
    if frames is None:
        return None
    unit = (h.get("units") or {}).get("time", "min")
    if unit not in TIME_SCALE:
        raise VolumeFormatError(f"unknown time unit {unit!r}; use 'min' or 's'")
    f = np.asarray(frames, dtype=float) * TIME_SCALE[unit]
    if f.ndim != 2 or f.shape[1] != 2:
        raise VolumeFormatError("frames must be a list of [t_start, t_end] pairs")
    lam = float(h.get("lambda") or 0.0) / TIME_SCALE[unit]  # per-second rate to per-minute
    try:
        return FrameSchedule(f[:, 0], f[:, 1], lam)
    except ValueError as e:
        raise VolumeFormatError(f"invalid frame schedule: {e}") from None


def read_volume(path) -> VolumeFile:
    """Read and validate a volume; the payload length must match the header."""
    hp, pp = volume_paths(path)
    try:
        h = json.loads(hp.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{hp}: invalid JSON header ({e})") from None
    if h.get("format") != FORMAT:
        raise VolumeFormatError(f"{hp}: not a {FORMAT} header")
    if h.get("dtype", "float32") != "float32" or h.get("byteorder", "little") != "little":
        raise VolumeFormatError(f"{hp}: only little-endian float32 payloads are supported")
    try:
        nx, ny, nz = (int(v) for v in h["dims"])
        C = int(h["channels"])
    except (KeyError, TypeError, ValueError):
        raise VolumeFormatError(f"{hp}: header needs dims [nx, ny, nz] and channels") from None
    if min(nx, ny, nz, C) < 1:
        raise VolumeFormatError(f"{hp}: dims and channels must be positive")
    payload = pp  # always the sibling with the same stem
    expected = nx * ny * nz * C * _DTYPE.itemsize
    size = payload.stat().st_size
    if size != expected:
        raise VolumeFormatError(f"{payload}: payload has {size} bytes, expected {expected} "
                                f"({nx}x{ny}x{nz}x{C} float32)")
    data = np.fromfile(payload, dtype=_DTYPE).reshape(C, nz, ny, nx)
    schedule = _schedule_from_header(h)
    return VolumeFile(np.moveaxis(data, 0, 3), tuple(h.get("voxel_mm", (1.0, 1.0, 1.0))), schedule,
                      h.get("channel_names"), (h.get("units") or {}).get("value", ""), h.get("meta") or {})


def read_dynamic(path, mask_path=None) -> DynamicVolume:
    vf = read_volume(path)
    mask = None
    if mask_path is not None:
        m = read_volume(mask_path)
        if m.n_channels != 1:
            raise VolumeFormatError("mask volume must have one channel")
        mask = m.data[..., 0] > 0
    return vf.to_dynamic(mask)


# --------------------------------------------------------------------------- curves


def write_curve_csv(path, t, values, force: bool = False, columns=("t", "value")):
    check_writable([path], force)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for row in zip(t, *np.atleast_2d(values)):
            wr.writerow([repr(float(v)) for v in row])


def read_input_csv(path, time_units: str = "min") -> InputFunction:
    """Arterial input from a ``t,value`` CSV (``t_s`` column or ``time_units='s'`` for seconds)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty curve file")
    head = [c.strip() for c in rows[0]]
    if head[0] == "t_s":
        time_units = "s"
    elif head[0] != "t":
        raise ValueError(f"{path}: expected a 't,value' header, got {','.join(head)}")
    try:
        arr = np.array([[float(v) for v in r[:2]] for r in rows[1:] if r], dtype=float)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise ValueError(f"{path}: need at least two (t, value) rows")
    if time_units not in TIME_SCALE:
        raise ValueError(f"unknown time unit {time_units!r}")
    return InputFunction(arr[:, 0] * TIME_SCALE[time_units], arr[:, 1])


def write_input_csv(path, input: InputFunction, force: bool = False):
    write_curve_csv(path, input.times, input.values, force)


def write_roi_csv(path, schedule: FrameSchedule, curves, names=None, force: bool = False):
    """Frame table ``t_start,t_end,<roi...>`` with one column per ROI curve."""
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    names = [f"roi{i}" for i in range(curves.shape[0])] if names is None else list(names)
    check_writable([path], force)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t_start", "t_end"] + names)
        for b in range(schedule.n_frames):
            wr.writerow([repr(float(schedule.starts[b])), repr(float(schedule.ends[b]))]
                        + [repr(float(v)) for v in curves[:, b]])


def read_roi_csv(path, decay: float = 0.0):
    """Returns ``(schedule, curves (n, B), names)``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2 or rows[0][:2] != ["t_start", "t_end"] or len(rows[0]) < 3:
        raise ValueError(f"{path}: expected a 't_start,t_end,<roi...>' table")
    arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return FrameSchedule(arr[:, 0], arr[:, 1], decay), arr[:, 2:].T.copy(), rows[0][2:]


# --------------------------------------------------------------------------- manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def rerun_line(argv=None) -> str:
    """Shell line that repeats a run; ``argv`` excludes the program name."""
    argv = sys.argv[1:] if argv is None else list(argv)
    return shlex.join(["residuemap"] + argv + ([] if "--force" in argv else ["--force"]))


def write_manifest(outdir, command: str, inputs, parameters: dict, seed=None, argv=None,
                   outputs=()) -> Path:
    """``manifest.json`` with input hashes, parameters, seed, tool version and re-run line.

    Always overwritten: it describes the run that produced the directory.
    """
    outdir = Path(outdir)
    man = {
        "tool": "residuemap",
        "version": _version(),
        "command": command,
        "rerun": rerun_line(argv),
        "cwd": os.getcwd(),
        "seed": seed,
        "parameters": parameters,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(outdir)) if Path(p).is_relative_to(outdir) else str(p):
                    file_sha256(p) for p in outputs},
    }
    path = outdir / "manifest.json"
    path.write_text(dumps_json(man))
    return path
