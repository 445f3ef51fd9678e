"""Piecewise-affine barrier certificates for nonlinear control systems.

Fit a ReLU surrogate, read off its exact PWA form, synthesize PWA barriers by
linear programming at several class-K slopes, compose them by pointwise max,
and check the result against the true dynamics on the set's boundary.
"""
__version__ = "0.1.0"
