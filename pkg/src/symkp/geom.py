"""Deterministic geometry primitives.

Sampling, grouping, nearest neighbours, Chamfer distances, reflections,
up-axis rotations, closed-form similarity registration, and the
non-maximal suppression used to prune near-duplicate keypoint slots.
All tie-breaks resolve to the smallest index so every routine is
bit-for-bit reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Raised when the input admits no well-defined result."""


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sampling(points, n: int, seed: int = 0,
                            first_index: int | None = None) -> np.ndarray:
    """Greedy subsample of ``n`` indices maximizing the minimum pairwise distance.

    The first index is drawn from ``seed`` unless ``first_index`` pins it.
    Later picks maximize the minimum distance to the selected set, ties
    going to the smallest index.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if not 1 <= n <= m:
        raise ValueError(f"cannot sample {n} points from a set of {m}")
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(m))
    selected = np.empty(n, dtype=np.intp)
    selected[0] = first_index
    min_sq = np.einsum("ij,ij->i", points - points[first_index],
                       points - points[first_index])
    min_sq[first_index] = -1.0  # never re-pick
    for i in range(1, n):
        nxt = int(np.argmax(min_sq))  # argmax takes the first max: smallest index
        selected[i] = nxt
        d = points - points[nxt]
        np.minimum(min_sq, np.einsum("ij,ij->i", d, d), out=min_sq)
        min_sq[nxt] = -1.0
    return selected


def point_to_node_grouping(points, nodes) -> np.ndarray:
    """Assign every point to its nearest node (ties to the smallest node index)."""
    if len(nodes) < 1:
        raise ValueError("need at least one node")
    return np.argmin(pairwise_sqdist(points, nodes), axis=1)


def knn(queries, refs, k: int) -> np.ndarray:
    """Indices of the k nearest refs per query, ascending distance, ties by index."""
    refs = np.asarray(refs, dtype=np.float64)
    if k > len(refs):
        raise ValueError(f"k={k} exceeds reference set size {len(refs)}")
    d = pairwise_sqdist(queries, refs)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def bbox_volume(points) -> float:
    """Product of the three axis-aligned extents."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("empty point set")
    ext = points.max(axis=0) - points.min(axis=0)
    return float(ext[0] * ext[1] * ext[2])


def reflection_from_normal(normal) -> np.ndarray:
    """Householder reflection I - 2 n n^T about the plane through the origin."""
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
        raise ValueError(f"normal must be unit length, got norm {np.linalg.norm(n)}")
    return np.eye(3) - 2.0 * np.outer(n, n)


def rotation_about_up(angle: float) -> np.ndarray:
    """Proper rotation about the +z (up) axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    cos_a = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_a, -1.0, 1.0)))


def one_sided_chamfer(set_a, set_b) -> float:
    """Sum over A of the minimum squared distance to B."""
    d = pairwise_sqdist(set_a, set_b)
    return float(d.min(axis=1).sum())


def chamfer(set_a, set_b) -> float:
    """Symmetric sum of nearest-neighbour squared distances (sums, not means)."""
    return one_sided_chamfer(set_a, set_b) + one_sided_chamfer(set_b, set_a)


@dataclass
class SimilarityTransform:
    """scale * rotation @ x + translation, with det(rotation) = +1."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def similarity_registration(src, dst) -> SimilarityTransform:
    """Closed-form least-squares similarity aligning ordered ``src`` onto ``dst``.

    Minimizes sum ||s R src_j + t - dst_j||^2 with R constrained to a proper
    rotation. Raises DegenerateGeometryError when the cross-covariance is
    rank-deficient (e.g. collinear source points).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching Nx3 arrays, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    var_s = (ds * ds).sum() / n
    if var_s <= 0.0:
        raise DegenerateGeometryError("source points are coincident")
    cov = dd.T @ ds / n
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] <= max(sv[0] * 1e-9, 1e-300):
        raise DegenerateGeometryError("rank-deficient cross-covariance (collinear input)")
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    d_fix = np.array([1.0, 1.0, sign])
    rot = u @ np.diag(d_fix) @ vt
    scale = float((sv * d_fix).sum() / var_s)
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def nms_select(keypoint_sets, radius: float) -> list[int]:
    """Category-level suppression of near-duplicate keypoint slots.

    Averages each ordered slot over all provided sets, then greedily walks
    slots in ascending index: a slot whose mean position lies within
    ``radius`` of an already retained slot's mean is suppressed. The
    retained index list applies uniformly to every instance, so slot order
    (and therefore correspondence) is preserved.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in keypoint_sets])
    means = stack.mean(axis=0)
    retained: list[int] = []
    for j in range(len(means)):
        dup = any(np.linalg.norm(means[j] - means[r]) <= radius for r in retained)
        if not dup:
            retained.append(j)
    return retained
