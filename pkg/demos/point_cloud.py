# Back-project a toy depth map into a coloured point cloud.

import numpy as np

from uqdepth import CameraIntrinsics, backproject, generate_toy_colon, read_ply, write_ply

(sample,) = generate_toy_colon(1, 96, seed=4)
k = CameraIntrinsics.default_for(96, 96)
cloud = backproject(sample.depth, sample.image, k)
print(len(cloud), "points; z from %.3f to %.3f" % (cloud.points[:, 2].min(), cloud.points[:, 2].max()))

# the principal point lies on the optical axis
row, col = int(k.cy), int(k.cx)
print("principal point ->", cloud.points[row * 96 + col])

write_ply(cloud, "toy_tube.ply")
again = read_ply("toy_tube.ply")
print("round trip exact:", np.array_equal(again.points, cloud.points))
