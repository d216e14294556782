"""
Per-camera normalization on a toy batch
=======================================

Two cameras see the same two people, but camera 1 doubles every value and
adds ten. Plain batch normalization mixes both cameras into one set of
moments; the camera-based layer standardizes each camera on its own.
"""

import numpy as np

from camnorm.errors import StatsMissingError
from camnorm.network import ArchConfig, Norm, bn_forward_train, cbn_forward_train, forward_eval, model_build
from camnorm.numerics import RngStream

x = np.array([[0.0], [2.0], [10.0], [14.0]])
cameras = np.array([0, 0, 1, 1])

# one shared set of moments: the camera offset survives normalization
y_bn, _ = bn_forward_train(x, Norm(1, "bn"))
print("BN :", y_bn.ravel().round(3))

# per-camera moments: both cameras land on the same values
y_cbn, cache = cbn_forward_train(x, cameras, Norm(1, "cbn"))
print("CBN:", y_cbn.ravel().round(3))

for g in cache["groups"]:
    print(f"camera {g['camera']}: mean {g['mean'][0]:.1f}  var {g['var'][0]:.1f}")

# at test time the layer needs one (mean, var) entry per camera; with none
# recorded it refuses to guess
model = model_build(ArchConfig.with_norm(1, "cbn"), RngStream(0))
try:
    forward_eval(model, x, 0)
except StatsMissingError as exc:
    print("eval without statistics:", exc)
