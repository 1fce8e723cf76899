"""Point-cloud ingestion, normalization, augmentation, and synthetic categories.

On-disk formats:
  .xyz  ASCII, one ``x y z [label]`` line per point (canonical interchange)
  .off  ASCII OFF, vertices read, faces ignored
  .ply  ASCII PLY, vertex element only
  manifest  JSON listing category, instance paths, split tags, and optional
            ground truth (symmetry-plane normal, per-instance misalignment)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom

MIN_POINTS = 4
UP_AXIS = 2  # +z
ARCHETYPES = ("table_like", "chair_like", "sym_deform_biped")


class PointCloudError(ValueError):
    pass


class ParseError(PointCloudError):
    """File-format violation; the message carries ``path:line``."""


@dataclass
class PointCloud:
    points: np.ndarray                 # (M, 3) float64
    labels: np.ndarray | None = None   # (M,) int part ids
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ManifestEntry:
    path: str
    split: str  # "train" | "test"

    @property
    def id(self) -> str:
        return Path(self.path).stem


@dataclass
class DatasetManifest:
    category: str
    instances: list[ManifestEntry]
    ground_truth_symmetry_normal: np.ndarray | None = None
    ground_truth_misalignment: dict[str, float] | None = None

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.instances if e.split == tag]


@dataclass
class SyntheticCategorySpec:
    archetype: str
    instance_count: int
    points_per_instance: int = 2000
    shape_jitter: dict[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0
    train_fraction: float = 0.85


def _check_min_points(n: int, where: str) -> None:
    if n < MIN_POINTS:
        raise PointCloudError(f"{where}: too few points ({n} < {MIN_POINTS})")


def _parse_xyz(path: Path) -> PointCloud:
    pts: list[list[float]] = []
    labels: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) not in (3, 4):
                raise ParseError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            try:
                pts.append([float(fields[0]), float(fields[1]), float(fields[2])])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad coordinate: {exc}") from None
            if len(fields) == 4:
                try:
                    labels.append(int(fields[3]))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad label {fields[3]!r}") from None
    if labels and len(labels) != len(pts):
        raise ParseError(f"{path}: label column present on only some lines")
    _check_min_points(len(pts), str(path))
    return PointCloud(np.array(pts), np.array(labels) if labels else None, id=path.stem)


def _parse_off(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines)
            if ln.split() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][1] != ["OFF"]:
        raise ParseError(f"{path}:1: missing OFF header")
    if len(rows) < 2:
        raise ParseError(f"{path}: missing counts line")
    lineno, counts = rows[1]
    if len(counts) != 3:
        raise ParseError(f"{path}:{lineno}: counts line needs 3 integers")
    try:
        nv = int(counts[0])
    except ValueError:
        raise ParseError(f"{path}:{lineno}: bad vertex count {counts[0]!r}") from None
    vert_rows = rows[2:2 + nv]
    if len(vert_rows) < nv:
        raise ParseError(f"{path}: expected {nv} vertices, file ends early")
    pts = []
    for lineno, fields in vert_rows:
        if len(fields) < 3:
            raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
        try:
            pts.append([float(v) for v in fields[:3]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad coordinate: {exc}") from None
    _check_min_points(len(pts), str(path))
    return PointCloud(np.array(pts), id=path.stem)


def _parse_ply(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: missing ply header")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if fields[0] == "format":
            if fields[1] != "ascii":
                raise ParseError(f"{path}:{i}: only ascii PLY is supported")
        elif fields[0] == "element":
            in_vertex = fields[1] == "vertex"
            if in_vertex:
                n_vertex = int(fields[2])
        elif fields[0] == "property" and in_vertex:
            props.append(fields[-1])
        elif fields[0] == "end_header":
            body_start = i
            break
    if n_vertex is None or body_start is None:
        raise ParseError(f"{path}: header lacks a vertex element")
    try:
        cols = [props.index(ax) for ax in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z properties") from None
    pts = []
    for lineno in range(body_start, body_start + n_vertex):
        if lineno >= len(lines):
            raise ParseError(f"{path}: expected {n_vertex} vertices, file ends early")
        fields = lines[lineno].split()
        try:
            pts.append([float(fields[c]) for c in cols])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno + 1}: bad vertex line: {exc}") from None
    _check_min_points(len(pts), str(path))
    return PointCloud(np.array(pts), id=path.stem)


_PARSERS = {".xyz": _parse_xyz, ".off": _parse_off, ".ply": _parse_ply}


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    parser = _PARSERS.get(path.suffix.lower())
    if parser is None:
        raise PointCloudError(f"unsupported extension {path.suffix!r} (want .xyz/.off/.ply)")
    pc = parser(path)
    if not np.all(np.isfinite(pc.points)):
        raise PointCloudError(f"{path}: non-finite coordinates")
    return pc


def save_xyz(pc: PointCloud, path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(pc.points):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if pc.labels is not None:
                line += f" {int(pc.labels[i])}"
            fh.write(line + "\n")


def save_off(pc: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(pc)} 0 0\n")
        for p in pc.points:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def save_ply(pc: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pc)}\n")
        fh.write("property float64 x\nproperty float64 y\nproperty float64 z\n")
        fh.write("end_header\n")
        for p in pc.points:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "category": manifest.category,
        "instances": [{"path": e.path, "split": e.split} for e in manifest.instances],
    }
    if manifest.ground_truth_symmetry_normal is not None:
        doc["ground_truth_symmetry_normal"] = [
            float(v) for v in manifest.ground_truth_symmetry_normal]
    if manifest.ground_truth_misalignment is not None:
        doc["ground_truth_misalignment"] = {
            k: float(v) for k, v in manifest.ground_truth_misalignment.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    entries = [ManifestEntry(path=str((path.parent / e["path"]).resolve()), split=e["split"])
               for e in doc["instances"]]
    normal = doc.get("ground_truth_symmetry_normal")
    return DatasetManifest(
        category=doc["category"],
        instances=entries,
        ground_truth_symmetry_normal=None if normal is None else np.asarray(normal, float),
        ground_truth_misalignment=doc.get("ground_truth_misalignment"),
    )


def normalize(pc: PointCloud) -> PointCloud:
    """Center on the bounding-box midpoint and scale the largest half-extent to 1.

    The scale is a single scalar across axes so symmetry planes survive.
    """
    _check_min_points(len(pc), pc.id or "cloud")
    lo = pc.points.min(axis=0)
    hi = pc.points.max(axis=0)
    half = (hi - lo).max() / 2.0
    if half <= 0.0:
        raise PointCloudError(f"{pc.id or 'cloud'}: degenerate (all points identical)")
    centered = pc.points - (lo + hi) / 2.0
    return PointCloud(centered / half, labels=pc.labels, id=pc.id)


def rotate_up(pc: PointCloud, angle: float) -> PointCloud:
    """Rotate the cloud about the up (+z) axis by ``angle`` radians."""
    rot = geom.rotation_about_up(angle)
    return PointCloud(pc.points @ rot.T, labels=pc.labels, id=pc.id)


def random_misalign(pc: PointCloud, max_deg: float, seed: int) -> tuple[PointCloud, float]:
    """Rotate about the up axis by an angle drawn uniformly from +-max_deg.

    Returns the rotated cloud and the applied angle in radians. The angle
    is for evaluation bookkeeping only and is never fed to training.
    """
    if not 0.0 <= max_deg <= 180.0:
        raise ValueError(f"max_deg must lie in [0, 180], got {max_deg}")
    if max_deg == 0.0:
        return PointCloud(pc.points.copy(), labels=pc.labels, id=pc.id), 0.0
    rng = np.random.default_rng(seed)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    return rotate_up(pc, angle), angle


def resample(pc: PointCloud, target_m: int, seed: int = 0) -> PointCloud:
    """Return exactly ``target_m`` points: subsample without replacement when
    shrinking, draw with replacement when growing. Labels ride along."""
    _check_min_points(len(pc), pc.id or "cloud")
    rng = np.random.default_rng(seed)
    m = len(pc)
    if m >= target_m:
        idx = rng.permutation(m)[:target_m]
    else:
        idx = rng.integers(0, m, size=target_m)
    labels = None if pc.labels is None else pc.labels[idx]
    return PointCloud(pc.points[idx], labels=labels, id=pc.id)


# ---------------------------------------------------------------------------
# Synthetic categories. Desk-scale stand-ins with known ground truth: the
# table/chair archetypes are exactly mirror-symmetric about x = 0; the biped
# archetype is per-instance asymmetric but its limb-pose sampler is
# mirror-closed (left/right angles are i.i.d. from one distribution).

TABLE_JITTER = {
    "half_width": (0.7, 1.1),      # x
    "half_depth": (0.5, 0.8),      # y
    "height": (0.8, 1.2),          # z
    "top_thickness": (0.06, 0.12),
    "leg_half": (0.04, 0.08),
    "leg_inset": (0.05, 0.15),
    "lip_height": (0.15, 0.30),    # back-edge lip, breaks fore-aft symmetry
}

CHAIR_JITTER = {
    "half_width": (0.45, 0.65),
    "half_depth": (0.45, 0.65),
    "seat_height": (0.8, 1.1),
    "seat_thickness": (0.08, 0.14),
    "leg_half": (0.04, 0.07),
    "leg_inset": (0.03, 0.10),
    "back_height": (0.8, 1.2),
    "back_thickness": (0.08, 0.14),
}

BIPED_JITTER = {
    "torso_half_width": (0.22, 0.30),
    "torso_half_depth": (0.12, 0.18),
    "torso_height": (0.7, 0.9),
    "head_radius": (0.13, 0.18),
    "limb_half": (0.05, 0.08),
    "arm_length": (0.55, 0.75),
    "leg_length": (0.8, 1.0),
    "arm_swing_deg": (-50.0, 50.0),
    "leg_swing_deg": (-30.0, 30.0),
}

TABLE_LABELS = {"top": 0, "leg": 1, "lip": 2}
CHAIR_LABELS = {"seat": 0, "leg": 1, "back": 2}
BIPED_LABELS = {"torso": 0, "head": 1, "arm_l": 2, "arm_r": 3,
                "leg_l": 4, "leg_r": 5, "foot_l": 6, "foot_r": 7}


def _sample_box_surface(rng: np.random.Generator, lo, hi, n: int) -> np.ndarray:
    """Uniform points on the surface of an axis-aligned box."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    areas = np.repeat(areas, 2)  # -face then +face per axis
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 3))
    pts = lo + u * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _draw(rng: np.random.Generator, jitter: dict, key: str) -> float:
    lo, hi = jitter[key]
    return float(rng.uniform(lo, hi))


def _table_boxes(rng, jitter):
    w = _draw(rng, jitter, "half_width")
    d = _draw(rng, jitter, "half_depth")
    h = _draw(rng, jitter, "height")
    t = _draw(rng, jitter, "top_thickness")
    lh = _draw(rng, jitter, "leg_half")
    inset = _draw(rng, jitter, "leg_inset")
    lip = _draw(rng, jitter, "lip_height")
    boxes = [(TABLE_LABELS["top"], (-w, -d, h - t), (w, d, h))]
    cx, cy = w - inset - lh, d - inset - lh
    for sx in (-1, 1):
        for sy in (-1, 1):
            boxes.append((TABLE_LABELS["leg"],
                          (sx * cx - lh, sy * cy - lh, 0.0),
                          (sx * cx + lh, sy * cy + lh, h - t)))
    boxes.append((TABLE_LABELS["lip"], (-w, d - t, h), (w, d, h + lip)))
    return boxes


def _chair_boxes(rng, jitter):
    w = _draw(rng, jitter, "half_width")
    d = _draw(rng, jitter, "half_depth")
    h = _draw(rng, jitter, "seat_height")
    t = _draw(rng, jitter, "seat_thickness")
    lh = _draw(rng, jitter, "leg_half")
    inset = _draw(rng, jitter, "leg_inset")
    bh = _draw(rng, jitter, "back_height")
    bt = _draw(rng, jitter, "back_thickness")
    boxes = [(CHAIR_LABELS["seat"], (-w, -d, h - t), (w, d, h))]
    cx, cy = w - inset - lh, d - inset - lh
    for sx in (-1, 1):
        for sy in (-1, 1):
            boxes.append((CHAIR_LABELS["leg"],
                          (sx * cx - lh, sy * cy - lh, 0.0),
                          (sx * cx + lh, sy * cy + lh, h - t)))
    boxes.append((CHAIR_LABELS["back"], (-w, d - bt, h), (w, d, h + bh)))
    return boxes


def _sample_symmetric_instance(rng, boxes, n_points: int) -> PointCloud:
    """Sample a mirror-symmetric cloud by emitting each drawn point with its
    x-negated twin. Box layouts must be symmetric about x = 0 (legs pair up,
    slabs span the plane), so labels transfer unchanged."""
    areas = []
    for _, lo, hi in boxes:
        e = np.subtract(hi, lo)
        areas.append(2.0 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2]))
    areas = np.asarray(areas)
    n_half = n_points // 2
    choice = rng.choice(len(boxes), size=n_half, p=areas / areas.sum())
    pts = np.empty((n_half, 3))
    labels = np.empty(n_half, dtype=np.int64)
    for b, (lab, lo, hi) in enumerate(boxes):
        rows = np.flatnonzero(choice == b)
        if rows.size:
            pts[rows] = _sample_box_surface(rng, lo, hi, rows.size)
            labels[rows] = lab
    mirrored = pts * np.array([-1.0, 1.0, 1.0])
    all_pts = np.concatenate([pts, mirrored])
    all_labels = np.concatenate([labels, labels])
    if n_points % 2:  # odd count: one extra point pinned onto the plane
        extra = pts[0].copy()
        extra[0] = 0.0
        all_pts = np.concatenate([all_pts, extra[None]])
        all_labels = np.concatenate([all_labels, labels[:1]])
    return PointCloud(all_pts, labels=all_labels)


def _swing_matrix(swing_rad: float) -> np.ndarray:
    c, s = math.cos(swing_rad), math.sin(swing_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _limb_points(rng, n, half, length, anchor, swing_rad):
    """Surface points of a downward limb box swung about the x axis at its anchor."""
    local = _sample_box_surface(rng, (-half, -half, -length), (half, half, 0.0), n)
    return local @ _swing_matrix(swing_rad).T + np.asarray(anchor)


def _limb_end(length, anchor, swing_rad) -> np.ndarray:
    return _swing_matrix(swing_rad) @ np.array([0.0, 0.0, -length]) + np.asarray(anchor)


def biped_pose_angles(seed: int, index: int) -> dict[str, float]:
    """Limb swing angles (radians) for one biped instance.

    Left and right draws are i.i.d. from the same interval, so the pose
    distribution is closed under mirroring even though individual poses
    are asymmetric.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 7]))
    arm_lo, arm_hi = BIPED_JITTER["arm_swing_deg"]
    leg_lo, leg_hi = BIPED_JITTER["leg_swing_deg"]
    return {
        "arm_l": math.radians(rng.uniform(arm_lo, arm_hi)),
        "arm_r": math.radians(rng.uniform(arm_lo, arm_hi)),
        "leg_l": math.radians(rng.uniform(leg_lo, leg_hi)),
        "leg_r": math.radians(rng.uniform(leg_lo, leg_hi)),
    }


def _sample_biped_instance(rng, jitter, n_points: int, angles: dict) -> PointCloud:
    tw = _draw(rng, jitter, "torso_half_width")
    td = _draw(rng, jitter, "torso_half_depth")
    th = _draw(rng, jitter, "torso_height")
    hr = _draw(rng, jitter, "head_radius")
    lh = _draw(rng, jitter, "limb_half")
    arm_len = _draw(rng, jitter, "arm_length")
    leg_len = _draw(rng, jitter, "leg_length")
    hip_z = leg_len
    shoulder_z = hip_z + th
    head_z = shoulder_z + hr + 0.05
    foot = 2.2 * lh  # feet extend forward (+y): breaks the 180-degree ambiguity

    parts = [
        ("torso", None, (-tw, -td, hip_z), (tw, td, shoulder_z)),
        ("head", None, (-hr, -hr, head_z - hr), (hr, hr, head_z + hr)),
    ]
    limb_specs = [
        ("arm_l", (-tw - lh, 0.0, shoulder_z - lh), arm_len, angles["arm_l"]),
        ("arm_r", (tw + lh, 0.0, shoulder_z - lh), arm_len, angles["arm_r"]),
        ("leg_l", (-tw + lh, 0.0, hip_z), leg_len, angles["leg_l"]),
        ("leg_r", (tw - lh, 0.0, hip_z), leg_len, angles["leg_r"]),
    ]

    def box_area(lo, hi):
        e = np.subtract(hi, lo)
        return 2.0 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2])

    areas = [box_area(lo, hi) for _, _, lo, hi in parts]
    limb_area = box_area((-lh, -lh, 0), (lh, lh, arm_len))
    foot_area = box_area((-lh, -lh, 0), (lh, foot, lh))
    weights = np.array(areas + [limb_area] * 4 + [foot_area] * 2)
    counts = np.maximum(1, np.round(weights / weights.sum() * n_points).astype(int))
    while counts.sum() > n_points:
        counts[int(np.argmax(counts))] -= 1
    while counts.sum() < n_points:
        counts[int(np.argmax(weights))] += 1

    chunks, labels = [], []
    for (name, _, lo, hi), c in zip(parts, counts[:2]):
        chunks.append(_sample_box_surface(rng, lo, hi, c))
        labels.append(np.full(c, BIPED_LABELS[name], dtype=np.int64))
    for (name, anchor, length, swing), c in zip(limb_specs, counts[2:6]):
        chunks.append(_limb_points(rng, c, lh, length, anchor, swing))
        labels.append(np.full(c, BIPED_LABELS[name], dtype=np.int64))
    for side, c in zip(("l", "r"), counts[6:8]):
        _, anchor, length, swing = limb_specs[2 if side == "l" else 3]
        end = _limb_end(length, anchor, swing)
        lo = (end[0] - lh, end[1] - lh, end[2])
        hi = (end[0] + lh, end[1] + foot, end[2] + 2 * lh)
        chunks.append(_sample_box_surface(rng, lo, hi, c))
        labels.append(np.full(c, BIPED_LABELS[f"foot_{side}"], dtype=np.int64))
    return PointCloud(np.concatenate(chunks), labels=np.concatenate(labels))


def generate_synthetic_category(spec: SyntheticCategorySpec
                                ) -> tuple[DatasetManifest, dict[str, PointCloud]]:
    """Build a deterministic synthetic category: clouds keyed by instance id
    plus a manifest with split tags (train fraction 0.85 by default) and,
    for the mirror-symmetric archetypes, the ground-truth plane normal."""
    if spec.archetype not in ARCHETYPES:
        raise ValueError(f"unknown archetype {spec.archetype!r} (want one of {ARCHETYPES})")
    if spec.instance_count < 1 or spec.points_per_instance < MIN_POINTS:
        raise ValueError("instance_count must be >= 1 and points_per_instance >= 4")

    base = {"table_like": TABLE_JITTER, "chair_like": CHAIR_JITTER,
            "sym_deform_biped": BIPED_JITTER}[spec.archetype]
    jitter = {**base, **spec.shape_jitter}

    clouds: dict[str, PointCloud] = {}
    entries: list[ManifestEntry] = []
    n_train = int(spec.train_fraction * spec.instance_count)
    for i in range(spec.instance_count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        if spec.archetype == "table_like":
            pc = _sample_symmetric_instance(rng, _table_boxes(rng, jitter),
                                            spec.points_per_instance)
        elif spec.archetype == "chair_like":
            pc = _sample_symmetric_instance(rng, _chair_boxes(rng, jitter),
                                            spec.points_per_instance)
        else:
            angles = biped_pose_angles(spec.seed, i)
            pc = _sample_biped_instance(rng, jitter, spec.points_per_instance, angles)
        cid = f"{spec.archetype}_{i:04d}"
        pc.id = cid
        clouds[cid] = pc
        entries.append(ManifestEntry(path=f"{cid}.xyz",
                                     split="train" if i < n_train else "test"))
    normal = np.array([1.0, 0.0, 0.0]) if spec.archetype != "sym_deform_biped" else None
    manifest = DatasetManifest(category=spec.archetype, instances=entries,
                               ground_truth_symmetry_normal=normal)
    return manifest, clouds
