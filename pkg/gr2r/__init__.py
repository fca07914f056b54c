"""
Generalized recorrupted-to-recorrupted (GR2R) noise splitting for
self-supervised denoising under exponential-family noise.
"""

__version__ = '0.1.0'
