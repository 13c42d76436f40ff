"""
Residual multiplicative filter networks with staged coarse-to-fine training,
plus a synthetic cryo-EM simulation and reconstruction pipeline.
"""

__version__ = '1.0.0'
