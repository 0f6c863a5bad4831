"""Cascaded dilated residual network liver and lesion segmentation.

A self-contained numpy implementation: CT-style phantom volumes, HU
windowing and slice sampling, a dilated residual segmentation network with
its own autodiff engine, a two-stage cascade, multi-scale fusion,
morphological post-processing, and overlap metrics.
"""

__version__ = "0.1.0"
