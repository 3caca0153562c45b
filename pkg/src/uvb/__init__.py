"""Updating variational Bayes: sequential posterior approximation with mixture-normal families."""

from .engines import PosteriorSequence, UpdateSchedule, svb_fit, svb_run, uvb_run, uvbis_run
from .family import FamilySpec
from .sga import StopRule

__all__ = [
    "FamilySpec",
    "PosteriorSequence",
    "StopRule",
    "UpdateSchedule",
    "svb_fit",
    "svb_run",
    "uvb_run",
    "uvbis_run",
]
__version__ = "0.1.0"
