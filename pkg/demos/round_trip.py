"""Encode a point set as a Gaussian mixture, then recover it by particle search.

    python demos/round_trip.py
"""

import numpy as np

from setflow.inverse_transform import DecodeConfig, decode
from setflow.metrics import chamfer
from setflow.point_process import Region
from setflow.representation import encode, l2_norm_sq

region = Region((0.0, 0.0), (1.0, 1.0))
x = np.array([[0.2, 0.3], [0.7, 0.2], [0.5, 0.8], [0.85, 0.65]])

f = encode(x, epsilon=0.01)
print("bandwidths:", np.round(f.sigmas, 5))
print("squared L2 norm:", round(l2_norm_sq(f), 2))

cfg = DecodeConfig.for_mixture(f, region, seed=0)
points, diag = decode(f, cfg, region=region)
print(f"recovered {len(points)} of {len(x)} points from {diag['n_groups']} particle groups")
print("Chamfer distance to the original set:", f"{chamfer(points, x):.2e}")
