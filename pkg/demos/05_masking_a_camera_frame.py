"""
From azimuth to pixels
======================

An angular region around a sound source becomes a full-height rectangle in
the RGB-D image; depth inside it is zeroed and keypoints there are dropped.
"""

import numpy as np

from acoustic_fusion import CameraModel, build_mask, filter_features, invalidate_depth
from acoustic_fusion.fusion import azimuth_to_column, make_transform

# 640x480 camera, 7.4 cm to the side of the array, same orientation
camera = CameraModel(500.0, 500.0, 320.0, 240.0, 640, 480, make_transform(translation=[0.074, 0, 0]), 90.0)

for phi in (0.0, 10.0, -10.0, 30.0, 60.0):
    col, clamped = azimuth_to_column(phi, camera)
    near, _ = azimuth_to_column(phi, camera, depth=2.0)
    print(f"azimuth {phi:5.1f}: far-field column {col:6.1f}, at 2 m {near:6.1f}, clamped={clamped}")

# a talker at -15 deg whose region spans [-25, -5]
mask = build_mask(0, [(-15.0, -25.0, -5.0)], camera, depth=2.0)
r = mask.rectangles[0]
print("\nrectangle columns", (r.col_min, r.col_max), "rows", (r.row_min, r.row_max))

depth = np.full((480, 640), 3.0)
cleared = invalidate_depth(depth, mask)
print("depth pixels removed:", int((cleared == 0).sum()))

rng = np.random.default_rng(0)
keypoints = np.c_[rng.uniform(0, 640, 500), rng.uniform(0, 480, 500)]
kept = filter_features(keypoints, mask)
print(f"keypoints kept: {len(kept)} of {len(keypoints)}")
