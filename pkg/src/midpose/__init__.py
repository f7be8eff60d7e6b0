"""Viewpoint estimation of furniture from frozen mid-level feature maps.

Modules:

* :mod:`midpose.tensorkit` - small NHWC neural network library with manual backprop
* :mod:`midpose.geometry` - rigid transforms, projection, PnP, view angles
* :mod:`midpose.binning` - overlapping angular bins
* :mod:`midpose.silhouette` - mesh silhouettes, D-masks, template matching
* :mod:`midpose.posenet` - two-stage azimuth/elevation model
* :mod:`midpose.datasets` - annotations, splits, synthetic data
* :mod:`midpose.labeler` - pose labels for RGB-D scenes from 3D boxes
* :mod:`midpose.cli` - command line interface
"""

__version__ = "0.1.0"
