"""Tour of the geometry primitives used across the toolkit."""

import numpy as np

from symkp import (chamfer, farthest_point_sampling, knn, nms_select,
                   reflection_from_normal, rotation_about_up, similarity_registration)

rng = np.random.default_rng(0)
cloud = rng.normal(size=(500, 3))

# farthest point sampling spreads picks across the cloud
idx = farthest_point_sampling(cloud, 8, seed=1)
print("FPS picks:", idx)
print("min pairwise distance of picks:",
      min(np.linalg.norm(cloud[a] - cloud[b]) for a in idx for b in idx if a != b).round(3))

# k nearest neighbours
print("3-NN of the first pick:", knn(cloud[idx[:1]], cloud, 3)[0])

# Householder reflection about a plane through the origin
n = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
refl = reflection_from_normal(n)
print("reflection involution error:", np.abs(refl @ refl - np.eye(3)).max())

# chamfer distance is a symmetric set-to-set fit measure
a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
print(f"chamfer(a,b) = {chamfer(a, b):.4f} = chamfer(b,a) = {chamfer(b, a):.4f}")

# closed-form similarity registration recovers a known transform exactly
src = rng.normal(size=(10, 3))
true_rot = rotation_about_up(0.8)
dst = 1.7 * src @ true_rot.T + np.array([0.3, -0.2, 1.0])
tf = similarity_registration(src, dst)
print(f"recovered scale {tf.scale:.6f} (true 1.7), "
      f"rotation error {np.abs(tf.rotation - true_rot).max():.2e}, "
      f"translation error {np.abs(tf.translation - [0.3, -0.2, 1.0]).max():.2e}")

# slot suppression: average positions within the radius collapse to one slot
sets = [np.array([[0, 0, 0], [0.05, 0, 0], [2, 0, 0], [0, 2, 0]], float)
        + rng.normal(scale=0.01, size=(4, 3)) for _ in range(5)]
print("retained slots at radius 0.2:", nms_select(sets, radius=0.2))
