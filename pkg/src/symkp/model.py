"""Keypoint prediction model.

Two branches share one backbone of pointwise perceptrons with max pooling:
the node branch regresses an unordered tuple of nodes that anchor training,
and the pose/coefficients branch predicts an up-axis rotation plus the
coefficients of a learned low-rank keypoint basis. Category-wide state
(basis, mirror-plane normal, common rotation offset, net weights) lives in
CategoryParams and is optimized jointly with the branches.

Decoding modes:
  none         keypoints = R_total . mat(basis @ c), full basis
  instance     half the slots decode from a half basis, the other half is
               that half reflected about the learned plane; the rotation is
               applied to both halves afterward, so mirror pairs hold
               exactly in the unrotated frame
  deformation  both halves get independent coefficients; the second half
               uses the reflected copy of the half basis
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import geom

MODES = ("none", "instance", "deformation")
_MODE_CODES = {m: i for i, m in enumerate(MODES)}

POINT_MLP_WIDTHS = (64, 128)
AGG_MLP_WIDTHS = (256, 256)
OFFSET_HIDDEN = 128
POSE_HIDDEN = (256, 128)
LEAKY_SLOPE = 0.1
DEFAULT_N_NODES = 16
DEFAULT_K_BASIS = 8
DEFAULT_K_NEIGHBORS = 8


class CheckpointError(ValueError):
    pass


@dataclass
class PoseCoeffs:
    """Per-instance pose and basis coefficients."""
    angle: float                        # rotation about +z, radians, (-pi, pi]
    coeffs: np.ndarray                  # (K,)
    coeffs_mirror: np.ndarray | None = None  # (K,), deformation mode only
    degenerate: bool = False            # raw (cos, sin) was ~zero


@dataclass
class CategoryParams:
    """All learned category state."""
    mode: str
    n_nodes: int
    k_basis: int
    k_neighbors: int
    half_basis: np.ndarray      # (3*n_nodes/2, K); full (3*n_nodes, K) in mode "none"
    sym_normal: np.ndarray      # (3,), unit
    category_angle: float
    net: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Prediction:
    nodes: np.ndarray           # (N, 3) unordered tuple
    keypoints: np.ndarray       # (N, 3) ordered, index = correspondence
    pose: PoseCoeffs
    features: np.ndarray        # (N, F) per-node features
    total_angle: float          # category_angle + pose.angle


def _uniform_fan_in(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _net_layer_plan(k_basis: int, mode: str) -> list[tuple[str, int, int]]:
    f1 = POINT_MLP_WIDTHS[-1]
    f2 = AGG_MLP_WIDTHS[-1]
    n_out = 2 + k_basis * (2 if mode == "deformation" else 1)
    return [
        ("point_mlp.0", 3, POINT_MLP_WIDTHS[0]),
        ("point_mlp.1", POINT_MLP_WIDTHS[0], POINT_MLP_WIDTHS[1]),
        # pair input: neighbour features, centre features, neighbour offset
        ("agg_mlp.0", 2 * f1 + 3, AGG_MLP_WIDTHS[0]),
        ("agg_mlp.1", AGG_MLP_WIDTHS[0], AGG_MLP_WIDTHS[1]),
        # offset head sees the node's own features, the pooled category
        # context, the cluster's relative centroid (a low-noise position
        # summary), and the seed position itself, so offsets can cancel
        # seeding noise (an offset cannot subtract a seed it never sees)
        ("offset_mlp.0", 2 * f2 + 6, OFFSET_HIDDEN),
        ("offset_mlp.1", OFFSET_HIDDEN, 3),
        ("pose_mlp.0", f2, POSE_HIDDEN[0]),
        ("pose_mlp.1", POSE_HIDDEN[0], POSE_HIDDEN[1]),
        ("pose_mlp.2", POSE_HIDDEN[1], n_out),
    ]


def init_category_params(n_nodes: int = DEFAULT_N_NODES, k_basis: int = DEFAULT_K_BASIS,
                         mode: str = "instance", seed: int = 0,
                         k_neighbors: int = DEFAULT_K_NEIGHBORS) -> CategoryParams:
    """Seeded initialization.

    Basis entries are uniform in [-0.5, 0.5]; net weights use fan-in
    uniform scaling. The node-offset output layer starts at zero so the
    untrained branch returns the seed nodes verbatim, and the pose output
    bias starts at (cos, sin) = (1, 0) so every instance begins at angle 0.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r} (want one of {MODES})")
    if n_nodes % 2 or n_nodes < 2:
        raise ValueError(f"n_nodes must be even and >= 2, got {n_nodes}")
    if not 1 <= k_basis <= 32:
        raise ValueError(f"k_basis must lie in [1, 32], got {k_basis}")
    rng = np.random.default_rng(seed)
    basis_rows = 3 * n_nodes if mode == "none" else 3 * n_nodes // 2
    half_basis = rng.uniform(-0.5, 0.5, size=(basis_rows, k_basis))
    net: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _net_layer_plan(k_basis, mode):
        net[f"{name}.w"] = _uniform_fan_in(rng, fan_in, (fan_in, fan_out))
        # nonzero biases keep the node's own (all-zero) centered coordinate
        # off the activation kinks
        net[f"{name}.b"] = _uniform_fan_in(rng, fan_in, fan_out)
    net["offset_mlp.1.w"] = np.zeros_like(net["offset_mlp.1.w"])
    net["offset_mlp.1.b"] = np.zeros_like(net["offset_mlp.1.b"])
    # (cos, sin) starts at angle zero; coefficient outputs start near one so
    # the first decoded keypoints already spread across the shape instead of
    # huddling at the origin and latching onto central nodes only
    net["pose_mlp.2.b"] = np.ones_like(net["pose_mlp.2.b"])
    net["pose_mlp.2.b"][1] = 0.0
    return CategoryParams(mode=mode, n_nodes=n_nodes, k_basis=k_basis,
                          k_neighbors=min(k_neighbors, n_nodes),
                          half_basis=half_basis,
                          sym_normal=np.array([1.0, 0.0, 0.0]),
                          category_angle=0.0, net=net)


# --- graph construction ----------------------------------------------------

def leaves_from_params(params: CategoryParams, requires_grad: bool = False
                       ) -> dict[str, dc.Tensor]:
    """Leaf tensors for every learned array. Training copies the data so the
    optimizer owns its state; inference shares the arrays read-only."""
    def wrap(a):
        return dc.Tensor(np.array(a) if requires_grad else a, requires_grad=requires_grad)

    leaves = {
        "half_basis": wrap(params.half_basis),
        "sym_normal": wrap(params.sym_normal),
        "category_angle": wrap(np.array([params.category_angle])),
    }
    for name, arr in params.net.items():
        leaves[name] = wrap(arr)
    return leaves


def params_from_leaves(meta: CategoryParams, leaves: dict[str, dc.Tensor]) -> CategoryParams:
    net = {name: np.array(leaves[name].data) for name in meta.net}
    return CategoryParams(mode=meta.mode, n_nodes=meta.n_nodes, k_basis=meta.k_basis,
                          k_neighbors=meta.k_neighbors,
                          half_basis=np.array(leaves["half_basis"].data),
                          sym_normal=np.array(leaves["sym_normal"].data),
                          category_angle=float(leaves["category_angle"].data[0]),
                          net=net)


def _mlp(x, leaves, prefix: str, n_layers: int, activate_last: bool):
    for i in range(n_layers):
        x = dc.affine(x, leaves[f"{prefix}.{i}.w"], leaves[f"{prefix}.{i}.b"])
        if activate_last or i < n_layers - 1:
            x = dc.leaky_relu(x, LEAKY_SLOPE)
    return x


def node_branch_graph(params: CategoryParams, leaves, points: np.ndarray,
                      seed: int, first_index: int | None = None):
    """Differentiable node branch.

    Seeds nodes by farthest point sampling, groups every point to its
    nearest node, runs the shared perceptron on node-centered coordinates
    with a per-cluster max, aggregates each node's nearest neighbour nodes'
    features through a second shared perceptron, and finally regresses a
    per-node offset added to the seed nodes.

    Returns (nodes, features, seed_nodes, assignment).
    """
    n = params.n_nodes
    if n > len(points):
        raise ValueError(f"n_nodes={n} exceeds point count {len(points)}")
    fps_idx = geom.farthest_point_sampling(points, n, seed=seed, first_index=first_index)
    init_nodes = points[fps_idx]
    assignment = geom.point_to_node_grouping(points, init_nodes)
    for s in range(n):  # duplicate FPS picks can starve a cluster; keep own point
        if not np.any(assignment == s):
            assignment = assignment.copy()
            assignment[fps_idx[s]] = s

    rel_np = points - init_nodes[assignment]
    rel = dc.Tensor(rel_np)
    h = _mlp(rel, leaves, "point_mlp", 2, activate_last=True)
    f1 = dc.segment_max(h, assignment, n)
    rel_centroids = np.stack([rel_np[assignment == s].mean(axis=0) for s in range(n)])

    k = params.k_neighbors
    neigh = geom.knn(init_nodes, init_nodes, k)
    centers = np.repeat(np.arange(n), k)
    offsets_in = dc.Tensor(init_nodes[neigh.ravel()] - init_nodes[centers])
    pair = dc.concat([dc.gather_rows(f1, neigh.ravel()), dc.gather_rows(f1, centers),
                      offsets_in], axis=1)
    h2 = _mlp(pair, leaves, "agg_mlp", 2, activate_last=True)
    f2 = dc.segment_max(h2, centers, n)

    pooled = dc.gather_rows(dc.reshape(dc.max_over_set(f2), (1, f2.shape[1])),
                            np.zeros(n, dtype=np.intp))
    offsets = _mlp(dc.concat([f2, pooled, dc.Tensor(rel_centroids),
                              dc.Tensor(init_nodes)], axis=1),
                   leaves, "offset_mlp", 2, activate_last=False)
    nodes = dc.add(dc.Tensor(init_nodes), offsets)
    return nodes, f2, init_nodes, assignment


def pose_branch_graph(params: CategoryParams, leaves, features):
    """Pose/coefficients head: global max over node features, then a
    perceptron whose outputs are a raw (cos, sin) pair (normalized to the
    unit circle) and the basis coefficients.

    Returns (cos_sin, coeffs, coeffs_mirror_or_None, degenerate).
    """
    k = params.k_basis
    pooled = dc.reshape(dc.max_over_set(features), (1, features.shape[1]))
    raw = _mlp(pooled, leaves, "pose_mlp", 3, activate_last=False)
    raw = dc.reshape(raw, (raw.shape[1],))
    cos_sin, degenerate = dc.unit2(dc.gather_rows(raw, np.arange(2)))
    coeffs = dc.gather_rows(raw, np.arange(2, 2 + k))
    coeffs_mirror = None
    if params.mode == "deformation":
        coeffs_mirror = dc.gather_rows(raw, np.arange(2 + k, 2 + 2 * k))
    return cos_sin, coeffs, coeffs_mirror, degenerate


def _reflect_rows(points, normal):
    """Householder reflection of row points about the plane with this normal."""
    proj = dc.matmul(points, dc.reshape(normal, (3, 1)))
    outer = dc.matmul(proj, dc.reshape(normal, (1, 3)))
    return dc.sub(points, dc.mul(outer, 2.0))


def reflect_basis_columns(basis, normal, n_half: int, k: int):
    """Reflect every column of a half basis, triplet by triplet."""
    triplets = dc.reshape(dc.transpose(basis), (k * n_half, 3))
    reflected = _reflect_rows(triplets, normal)
    return dc.transpose(dc.reshape(reflected, (k, 3 * n_half)))


def decode_graph(params: CategoryParams, leaves, cos_sin, coeffs, coeffs_mirror=None):
    """Keypoints from pose and coefficients, on the differentiation graph."""
    n, k = params.n_nodes, params.k_basis
    basis = leaves["half_basis"]
    if coeffs.shape != (k,):
        raise dc.ShapeMismatchError(f"coefficients {coeffs.shape}, expected ({k},)")
    c_col = dc.reshape(coeffs, (k, 1))
    if params.mode == "none":
        canonical = dc.reshape(dc.matmul(basis, c_col), (n, 3))
    else:
        half = dc.reshape(dc.matmul(basis, c_col), (n // 2, 3))
        normal = leaves["sym_normal"]
        if params.mode == "instance":
            canonical = dc.concat([half, _reflect_rows(half, normal)], axis=0)
        else:
            if coeffs_mirror is None:
                raise ValueError("deformation mode needs mirror coefficients")
            mirrored_basis = reflect_basis_columns(basis, normal, n // 2, k)
            second = dc.reshape(dc.matmul(mirrored_basis, dc.reshape(coeffs_mirror, (k, 1))),
                                (n // 2, 3))
            canonical = dc.concat([half, second], axis=0)
    theta = leaves["category_angle"]
    cat_cs = dc.concat([dc.cos(theta), dc.sin(theta)])
    posed = dc.rotate_about_up(canonical, cos_sin)      # instance rotation first,
    return dc.rotate_about_up(posed, cat_cs)            # then the category rotation


def build_forward(params: CategoryParams, leaves, points: np.ndarray, seed: int,
                  first_index: int | None = None) -> dict:
    """Full differentiable forward pass for one instance."""
    nodes, feats, init_nodes, assignment = node_branch_graph(
        params, leaves, points, seed, first_index)
    cos_sin, coeffs, coeffs_mirror, degenerate = pose_branch_graph(params, leaves, feats)
    keypoints = decode_graph(params, leaves, cos_sin, coeffs, coeffs_mirror)
    return {"nodes": nodes, "features": feats, "cos_sin": cos_sin, "coeffs": coeffs,
            "coeffs_mirror": coeffs_mirror, "keypoints": keypoints,
            "degenerate": degenerate, "init_nodes": init_nodes, "assignment": assignment}


# --- numpy-facing wrappers -------------------------------------------------

def node_branch(params: CategoryParams, points: np.ndarray, seed: int = 0,
                first_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    leaves = leaves_from_params(params)
    nodes, feats, _, _ = node_branch_graph(params, leaves, np.asarray(points, float),
                                           seed, first_index)
    return np.array(nodes.data), np.array(feats.data)


def pose_coeff_branch(params: CategoryParams, features: np.ndarray) -> PoseCoeffs:
    leaves = leaves_from_params(params)
    cos_sin, coeffs, coeffs_mirror, degenerate = pose_branch_graph(
        params, leaves, dc.Tensor(np.asarray(features, float)))
    c, s = cos_sin.data
    return PoseCoeffs(angle=math.atan2(s, c), coeffs=np.array(coeffs.data),
                      coeffs_mirror=None if coeffs_mirror is None else np.array(coeffs_mirror.data),
                      degenerate=degenerate)


def decode_keypoints(params: CategoryParams, pose: PoseCoeffs,
                     mode: str | None = None) -> np.ndarray:
    if mode is not None and mode != params.mode:
        raise ValueError(f"mode {mode!r} does not match trained mode {params.mode!r}")
    leaves = leaves_from_params(params)
    cos_sin = dc.Tensor(np.array([math.cos(pose.angle), math.sin(pose.angle)]))
    coeffs = dc.Tensor(np.asarray(pose.coeffs, float))
    mirror = None if pose.coeffs_mirror is None else dc.Tensor(np.asarray(pose.coeffs_mirror, float))
    return np.array(decode_graph(params, leaves, cos_sin, coeffs, mirror).data)


def predict(params: CategoryParams, points: np.ndarray, seed: int = 0,
            first_index: int | None = None) -> Prediction:
    leaves = leaves_from_params(params)
    out = build_forward(params, leaves, np.asarray(points, float), seed, first_index)
    c, s = out["cos_sin"].data
    pose = PoseCoeffs(angle=math.atan2(s, c), coeffs=np.array(out["coeffs"].data),
                      coeffs_mirror=None if out["coeffs_mirror"] is None
                      else np.array(out["coeffs_mirror"].data),
                      degenerate=out["degenerate"])
    return Prediction(nodes=np.array(out["nodes"].data),
                      keypoints=np.array(out["keypoints"].data),
                      pose=pose, features=np.array(out["features"].data),
                      total_angle=params.category_angle + pose.angle)


# --- checkpoint codec ------------------------------------------------------
# Layout: magic "CSKP", one version byte, u32 section count, then per section
# a u16 name length, the UTF-8 name, u8 ndim, ndim u32 dims, and the
# row-major little-endian float64 payload. Round-trips are bit-exact.

CHECKPOINT_MAGIC = b"CSKP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: CategoryParams) -> bytes:
    sections: list[tuple[str, np.ndarray]] = [
        ("meta.mode", np.array(float(_MODE_CODES[params.mode]))),
        ("meta.n_nodes", np.array(float(params.n_nodes))),
        ("meta.k_basis", np.array(float(params.k_basis))),
        ("meta.k_neighbors", np.array(float(params.k_neighbors))),
        ("half_basis", params.half_basis),
        ("sym_normal", params.sym_normal),
        ("category_angle", np.array(params.category_angle)),
    ]
    sections += [(f"net.{name}", arr) for name, arr in params.net.items()]
    blob = bytearray(CHECKPOINT_MAGIC)
    blob.append(CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(sections))
    for name, arr in sections:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob.append(arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    return bytes(blob)


def params_from_checkpoint_bytes(data: bytes) -> CategoryParams:
    view = memoryview(data)
    if len(view) < 9 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a CSKP checkpoint")
    if view[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {view[4]}")
    (count,) = struct.unpack_from("<I", view, 5)
    pos = 9
    sections: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            ndim = view[pos]
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", view, pos) if ndim else ()
            pos += 4 * ndim
            n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if ndim else 8
            payload = bytes(view[pos:pos + n_bytes])
            if len(payload) != n_bytes:
                raise CheckpointError("truncated checkpoint")
            pos += n_bytes
            sections[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    except (struct.error, IndexError):
        raise CheckpointError("truncated checkpoint") from None
    def scalar(name: str) -> float:
        return float(sections[name].ravel()[0])

    try:
        mode = MODES[int(scalar("meta.mode"))]
        params = CategoryParams(
            mode=mode,
            n_nodes=int(scalar("meta.n_nodes")),
            k_basis=int(scalar("meta.k_basis")),
            k_neighbors=int(scalar("meta.k_neighbors")),
            half_basis=sections["half_basis"],
            sym_normal=sections["sym_normal"],
            category_angle=scalar("category_angle"),
            net={name[len("net."):]: arr for name, arr in sections.items()
                 if name.startswith("net.")},
        )
    except (KeyError, IndexError) as exc:
        raise CheckpointError(f"checkpoint missing section: {exc}") from None
    return params
