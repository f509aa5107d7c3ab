"""Simulation, reconstruction and metrology for image-plane quantum imaging
with undetected photons (QIUP).

A nonlinear interferometer pumps a crystal twice; the signal photon is
detected while the idler probes the sample. The sample's transmission and
phase appear in the visibility and phase of single-photon interference on
the signal camera.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ConvergenceError,
    FitError,
    FormatError,
    ManifestError,
    NoFWHMError,
    QiupError,
    ReconstructionError,
    SetupError,
    UndersampledPSFError,
)
from .optics import FLAGSHIP, ImagingMetrics, SpdcSetup, imaging_metrics  # noqa: E402
from .sample import ComplexSample  # noqa: E402
from .interferometer import AcquisitionPlan, FrameStack, acquire_stack  # noqa: E402
from .reconstruct import ReconMaps, reconstruct_stack  # noqa: E402

__all__ = [
    "__version__",
    "AcquisitionPlan",
    "ComplexSample",
    "ConfigError",
    "ConvergenceError",
    "FLAGSHIP",
    "FitError",
    "FormatError",
    "FrameStack",
    "ImagingMetrics",
    "ManifestError",
    "NoFWHMError",
    "QiupError",
    "ReconMaps",
    "ReconstructionError",
    "SetupError",
    "SpdcSetup",
    "UndersampledPSFError",
    "acquire_stack",
    "imaging_metrics",
    "reconstruct_stack",
]
