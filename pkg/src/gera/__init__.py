"""Non-rigid point cloud registration from offline geometric descriptors.

Per-point descriptors are the edge lengths of the fully connected graph
over a point and its nearest neighbors. They replace raw coordinates as
network input, are rigid-motion invariant, and can be built once (offline)
and cached. A small MLP trained on them predicts per-point displacement
fields. Everything works in millimeters.
"""

__version__ = "0.1.0"
