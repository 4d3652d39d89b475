"""Satellite-conditioned diffusion downscaling of gridded meteorological fields."""

__version__ = "0.1.0"

from .grid import GridField, NormStats, Station, StationSet  # noqa: F401
from .diffusion import NoiseSchedule, make_schedule  # noqa: F401
