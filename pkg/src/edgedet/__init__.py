"""Reduced-precision inference and benchmarking for toy 2D/3D detectors.

Modules:

- ``tensor``: Int8 / F16 / F32 tensors, symmetric quantization, ETF files
- ``calibration``: activation histograms, minmax and entropy calibrators
- ``graph``: graph IR, shape inference, MAC counting and the executor
- ``builders``: toy RetinaNet, PFN and PointPillars 2D CNN graphs
- ``pillars``: pillarization, scatter and the PointPillars front end
- ``preproc``: bilinear resize, normalization and PPM I/O
- ``postproc``: anchors, box decoding, IoU, score filtering and NMS
- ``metrics``: greedy matching, AP, mAP and weighted mAP
- ``pipelines``: end-to-end pipelines and runtime reports
- ``cli``: the ``edgedet`` command
"""

__version__ = "0.1.0"
