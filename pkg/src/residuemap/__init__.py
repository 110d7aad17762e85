"""Voxel-level residue mixture modelling of dynamic tracer images.

Modules: ``timecore`` (frames, inputs, convolution), ``residue`` (residues
and kinetic summaries), ``nnls`` (weighted NNLS / IRLS), ``segmentation``,
``basis`` (basis construction and risk-based selection), ``mapper``
(voxel fits and parametric images), ``diagnostics`` (residual maps and CV
comparison), ``sim`` (simulation studies), ``phantom`` and ``io``.
"""

__version__ = "0.1.0"

from .basis import BasisSet, build_basis, default_delay_grid
from .mapper import map_volume, parametric_images, region_average, smooth_coefficients
from .residue import KineticSummary, kinetic_summary
from .segmentation import DynamicVolume, segment
from .timecore import FrameSchedule, InputFunction

__all__ = [
    "BasisSet", "DynamicVolume", "FrameSchedule", "InputFunction", "KineticSummary",
    "build_basis", "default_delay_grid", "kinetic_summary", "map_volume", "parametric_images",
    "region_average", "segment", "smooth_coefficients",
]
