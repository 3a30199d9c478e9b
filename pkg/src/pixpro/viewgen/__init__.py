"""Augmented view pairs with exact geometric provenance and cell assignment."""

from .augment import (
    AugConfig,
    apply_photometric,
    make_views,
    resized_crop,
    rng_stream,
    sample_crop,
    sample_view,
    sample_view_pair,
    solarize,
)
from .geometry import (
    AssignmentMatrix,
    CropRecord,
    DistanceMatrix,
    assign,
    assignment_for_pair,
    bin_diagonal,
    distance_matrix,
    overlap_check,
    read_assignment,
    warp_grid,
    write_assignment,
)
from .io import load_image, load_label_map, save_image, save_label_map

__all__ = [
    "AssignmentMatrix",
    "AugConfig",
    "CropRecord",
    "DistanceMatrix",
    "apply_photometric",
    "assign",
    "assignment_for_pair",
    "bin_diagonal",
    "distance_matrix",
    "load_image",
    "load_label_map",
    "make_views",
    "overlap_check",
    "read_assignment",
    "resized_crop",
    "rng_stream",
    "sample_crop",
    "sample_view",
    "sample_view_pair",
    "save_image",
    "save_label_map",
    "solarize",
    "warp_grid",
    "write_assignment",
]
