"""Infant brain 8-tissue segmentation across the neonatal to 6-month contrast change.

Modules: ``volcore`` (volumes and labels), ``phantom`` (synthetic cohorts),
``preprocess``, ``nets``, ``losses``, ``fusion``, ``orchestrator`` (the five
pipelines), ``metrics`` and ``cli``.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .volcore import LabelMap, Modality, Tissue, Volume  # noqa: E402

__all__ = ["LabelMap", "Modality", "Tissue", "Volume", "__version__"]
