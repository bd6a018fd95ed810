"""splatstream: anchor-based Gaussian maps, compression, and map sharing.

Library layout:

* ``core``       domain types (gaussians, poses, frames, maps)
* ``render``     deterministic CPU forward renderer + brute-force twin
* ``mapbuild``   RGB-D lifting, voxel anchors, virtual map, visibility
* ``codec``      embedding/quantization/entropy/range-coder/bitstream
* ``increment``  map deltas, staged database
* ``enhance``    virtual views, hole filling, confidence, pseudo ground truth
* ``metrics``    image/geometry quality metrics and loss terms
* ``refine``     analytic color/opacity gradients and projected descent
* ``protocol``   server/client state machines and framed wire transport
* ``scenegen``   procedural synthetic RGB-D scenes with a ray-cast oracle
* ``harness``    staged experiment runner, CSV/plot emission
"""

from splatstream.core import (
    AnchorFeature,
    CameraPose,
    FrameRGBD,
    Gaussian,
    GaussianKind,
    GaussianMap,
    covariance,
    lift_pixel,
    pose_distance,
    project,
)

__all__ = [
    "AnchorFeature",
    "CameraPose",
    "FrameRGBD",
    "Gaussian",
    "GaussianKind",
    "GaussianMap",
    "covariance",
    "lift_pixel",
    "pose_distance",
    "project",
]

__version__ = "0.1.0"
