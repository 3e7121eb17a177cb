"""
rangeseg: range-view LiDAR sequence segmentation.

Subpackages:
- util: SemanticKITTI file formats, pose algebra, checkpoints, synthetic sequences
- projection: range residual images, augmentation, sequence datasets
- network: tensor kernels, Meta-Kernel, network blocks, losses
- modules: k-NN back-projection and mIoU evaluation
- cli: the ``rangeseg`` command line
"""

__version__ = '1.0.0'
