"""Parallel decoding toolkit for masked diffusion language models (desk-scale)."""
__version__ = "0.1.0"

from .aup import AupConfig, AupResult, CurvePoint, alpha_sweep, compute_aup  # noqa: E402,F401
from .engine import DecodeMetrics, EngineConfig, decode  # noqa: E402,F401
from .sequence import Vocab  # noqa: E402,F401
