"""Two-stage point cloud completion.

A conditional diffusion model generates a coarse complete cloud from a
partial scan; a context-aware refiner then exploits short-range context
(mixed sampling with surface freezing) and long-range context (rigid
transformation invariant patch similarity) to recover detail while
keeping the trusted partial surface untouched.
"""

__version__ = "0.1.0"

from .geometry import (
    PointCloud,
    Patch,
    RigidFrame,
    farthest_point_sample,
    knn,
    extract_patch,
    estimate_normal,
    rotation_to_z,
    rotation_about_z,
    reflect_about_plane,
    invert_frame,
)

__all__ = [
    "PointCloud",
    "Patch",
    "RigidFrame",
    "farthest_point_sample",
    "knn",
    "extract_patch",
    "estimate_normal",
    "rotation_to_z",
    "rotation_about_z",
    "reflect_about_plane",
    "invert_frame",
]
