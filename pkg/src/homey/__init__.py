"""HOMEY: desk-scale property-risk detection stack.

Heuristic object masking, multi-scale attention fusion, risk-aware
multi-task losses, a grid detection head, trainer, NMS post-processing and
a full mAP evaluator — all on a small reverse-mode tensor engine with
numba-accelerated kernels (pure-numpy fallback via HOMEY_BACKEND=numpy).
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
