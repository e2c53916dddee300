"""Joint depth rectification, camera pose and focal recovery from monocular video.

Per-frame affine-invariant depth maps are turned into a scale-consistent
sequence by optimising a global scale/shift and a sparse set of anchor
weights per frame, together with relative camera poses and one focal
scalar, against photometric and geometric consistency between frame pairs.
The rectified depths are then fused into a TSDF volume.
"""

__version__ = "0.1.0"
