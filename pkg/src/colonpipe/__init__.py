"""Geometry pipeline around colonoscopy depth estimation: synthetic data,
trajectory-global depth evaluation, bundle adjustment, point-cloud fusion
and surface coverage."""

__version__ = "0.1.0"
