"""Myocardium segmentation of LGE MRI slices from cine prior contours."""

from .config import PipelineConfig, load_config
from .phantom import PhantomSpec, make_phantom
from .pipeline import compare_metrics, evaluate, run_batch, run_case, segment

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "PhantomSpec",
    "compare_metrics",
    "evaluate",
    "load_config",
    "make_phantom",
    "run_batch",
    "run_case",
    "segment",
]
