"""Evaluation suite: per-category metrics, semantic consistency, coefficient
distribution statistics, label transfer, and the intra-category
registration experiment.

The cross-instance metrics (correspondence, suppression of duplicate
slots) operate on keypoints with the model's own predicted rotation
removed: the predicted pose defines the shared category frame, which is
the only frame in which slots of differently misaligned instances are
comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dataio, geom
from .model import CategoryParams, PoseCoeffs, predict
from .trainer import derive_seed


@dataclass
class MetricsRecord:
    """One evaluated category: percentages in [0, 100], angle error in degrees."""
    category: str
    coverage_pct: float
    model_err_pct: float
    correspondence_pct: float
    inclusivity_pct: float
    sym_err_deg: float | None
    definition_nprime: int

    def csv_row(self) -> list:
        return [self.category, f"{self.coverage_pct:.2f}", f"{self.model_err_pct:.2f}",
                f"{self.correspondence_pct:.2f}", f"{self.inclusivity_pct:.2f}",
                "" if self.sym_err_deg is None else f"{self.sym_err_deg:.2f}",
                self.definition_nprime]


METRICS_CSV_HEADER = ["category", "coverage_pct", "model_err_pct", "correspondence_pct",
                      "inclusivity_pct", "sym_err_deg", "definition_nprime"]


def coverage_metric(keypoints, cloud_points) -> float:
    """Percent of the cloud's bounding-box volume covered by the keypoints' box."""
    cloud_vol = geom.bbox_volume(cloud_points)
    if cloud_vol <= 0.0:
        raise ValueError("cloud bounding box has zero volume")
    return float(np.clip(100.0 * geom.bbox_volume(keypoints) / cloud_vol, 0.0, 100.0))


def model_error_metric(nodes, keypoints, scale: float) -> float:
    """Root-mean Chamfer distance between nodes and keypoints as a percent of
    the shape scale, so the value reads as a length ratio."""
    chf = geom.chamfer(nodes, keypoints)
    rms = math.sqrt(chf / (len(nodes) + len(keypoints)))
    return 100.0 * rms / scale


def inclusivity_metric(keypoints, cloud_points, threshold: float = 0.15) -> float:
    """Percent of keypoints within ``threshold`` of their nearest cloud point."""
    d = np.sqrt(geom.pairwise_sqdist(keypoints, cloud_points).min(axis=1))
    return float(100.0 * np.mean(d <= threshold))


def symmetry_error_metric(pred_normal, gt_normal) -> float:
    """Angle between predicted and ground-truth plane normals, in degrees.

    Sign-invariant: normals describe planes, not directions."""
    a = np.asarray(pred_normal, float)
    b = np.asarray(gt_normal, float)
    cos_a = abs(float(a @ b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, cos_a)))


def kmeans(points: np.ndarray, k: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, float]:
    """Seeded Lloyd's algorithm, best inertia over ``restarts`` inits.

    Returns (labels, centroids, inertia). Deterministic for a fixed seed.
    """
    points = np.asarray(points, float)
    if k > len(points):
        raise ValueError(f"k={k} exceeds point count {len(points)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids = points[rng.choice(len(points), size=k, replace=False)].copy()
        labels = np.zeros(len(points), dtype=np.intp)
        for _ in range(max_iter):
            d = geom.pairwise_sqdist(points, centroids)
            new_labels = np.argmin(d, axis=1)
            for c in range(k):
                members = points[new_labels == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
                else:  # re-seed an empty cluster on the worst-fit point
                    centroids[c] = points[int(np.argmax(d.min(axis=1)))]
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = float(geom.pairwise_sqdist(points, centroids).min(axis=1).sum())
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    return best


def correspondence_metric(keypoint_sets, seed: int = 0, restarts: int = 10) -> float:
    """Percent of instances whose j-th keypoint lands in slot j's majority
    cluster, averaged over slots, with clusters from k-means (k = slot count)
    on the pooled keypoints of all instances."""
    sets = [np.asarray(s, float) for s in keypoint_sets]
    if len(sets) < 2:
        raise ValueError("need at least 2 instances")
    n_prime = len(sets[0])
    if any(len(s) != n_prime for s in sets):
        raise ValueError("all keypoint sets must share the same slot count")
    if len(sets) < n_prime:
        raise ValueError(f"need at least {n_prime} instances for {n_prime} slots")
    pooled = np.concatenate(sets)
    labels, _, _ = kmeans(pooled, n_prime, seed=seed, restarts=restarts)
    labels = labels.reshape(len(sets), n_prime)
    score = 0.0
    for j in range(n_prime):
        counts = np.bincount(labels[:, j], minlength=n_prime)
        score += counts.max() / len(sets)
    return 100.0 * score / n_prime


def semantic_consistency(keypoint_sets, labeled_clouds
                         ) -> tuple[np.ndarray, np.ndarray, float]:
    """Keypoint-to-part co-occurrence across instances.

    Each keypoint inherits the part label of its nearest cloud point. Row j
    of the returned matrix is slot j's label distribution over instances;
    the score is the mean of the per-slot maximum frequencies, in percent.
    Returns (matrix, label_values, score).
    """
    if len(keypoint_sets) != len(labeled_clouds):
        raise ValueError("keypoint sets and clouds must pair up")
    for pc in labeled_clouds:
        if pc.labels is None:
            raise ValueError(f"cloud {pc.id!r} carries no part labels")
    label_values = np.unique(np.concatenate([pc.labels for pc in labeled_clouds]))
    col = {v: i for i, v in enumerate(label_values)}
    n_prime = len(np.asarray(keypoint_sets[0]))
    matrix = np.zeros((n_prime, len(label_values)))
    for kps, pc in zip(keypoint_sets, labeled_clouds):
        nearest = np.argmin(geom.pairwise_sqdist(np.asarray(kps, float), pc.points), axis=1)
        for j, pt in enumerate(nearest):
            matrix[j, col[pc.labels[pt]]] += 1
    matrix /= len(keypoint_sets)
    score = float(100.0 * matrix.max(axis=1).mean())
    return matrix, label_values, score


def label_transfer(keypoints, keypoint_labels, pc: dataio.PointCloud) -> dataio.PointCloud:
    """Label every cloud point with its nearest keypoint's label."""
    keypoints = np.asarray(keypoints, float)
    keypoint_labels = np.asarray(keypoint_labels)
    nearest = np.argmin(geom.pairwise_sqdist(pc.points, keypoints), axis=1)
    return dataio.PointCloud(pc.points.copy(), labels=keypoint_labels[nearest], id=pc.id)


@dataclass
class CoeffStats:
    mean_c: np.ndarray
    var_c: np.ndarray
    mean_c_mirror: np.ndarray
    var_c_mirror: np.ndarray
    mean_of_variances_c: float
    mean_of_variances_c_mirror: float


def coefficient_distribution_check(pose_coeffs: list[PoseCoeffs]) -> CoeffStats:
    """Component-wise statistics of the two coefficient halves over a test
    set. Similar distributions indicate the two basis halves span the same
    deformations, i.e. the learned space is closed under mirroring."""
    if any(p.coeffs_mirror is None for p in pose_coeffs):
        raise ValueError("coefficient distribution check requires deformation mode")
    c = np.stack([p.coeffs for p in pose_coeffs])
    c2 = np.stack([p.coeffs_mirror for p in pose_coeffs])
    var_c = c.var(axis=0)
    var_c2 = c2.var(axis=0)
    return CoeffStats(mean_c=c.mean(axis=0), var_c=var_c,
                      mean_c_mirror=c2.mean(axis=0), var_c_mirror=var_c2,
                      mean_of_variances_c=float(var_c.mean()),
                      mean_of_variances_c_mirror=float(var_c2.mean()))


@dataclass
class RegistrationResult:
    mean_error_deg: float
    errors_deg: np.ndarray     # one row per registered (instance, template) pair
    skipped: int


def registration_experiment(keypoint_sets, template_ids, gt_angles) -> RegistrationResult:
    """Register every instance onto each template by a closed-form similarity
    over the ordered keypoints (the order is the correspondence) and compare
    the recovered rotation with the ground-truth relative misalignment."""
    sets = [np.asarray(s, float) for s in keypoint_sets]
    gt_angles = np.asarray(gt_angles, float)
    if len(sets) < 4:
        raise ValueError("need at least 4 instances (3 templates + 1 query)")
    errors = []
    skipped = 0
    for i, src in enumerate(sets):
        if i in template_ids:
            continue
        for t in template_ids:
            # the fitted rotation maps the instance frame onto the template
            # frame, so its ground truth is the relative misalignment
            expected = geom.rotation_about_up(gt_angles[t] - gt_angles[i])
            try:
                transform = geom.similarity_registration(src, sets[t])
            except geom.DegenerateGeometryError:
                skipped += 1
                continue
            err = geom.rotation_angle(transform.rotation.T @ expected)
            errors.append(math.degrees(err))
    errors = np.asarray(errors)
    mean = float(errors.mean()) if len(errors) else float("nan")
    return RegistrationResult(mean_error_deg=mean, errors_deg=errors, skipped=skipped)


# --- full-category evaluation pipeline --------------------------------------

@dataclass
class CategoryEvaluation:
    metrics: MetricsRecord
    retained: list[int]
    keypoint_sets: list[np.ndarray]            # posed frame, retained slots
    canonical_sets: list[np.ndarray]           # rotation removed, retained slots
    nodes: list[np.ndarray]
    poses: list[PoseCoeffs]
    misalign_angles: np.ndarray
    clouds: list[dataio.PointCloud]
    semantic_matrix: np.ndarray | None = None
    semantic_labels: np.ndarray | None = None
    semantic_score: float | None = None
    coeff_stats: CoeffStats | None = None
    extras: dict = field(default_factory=dict)


def evaluate_category(params: CategoryParams, manifest: dataio.DatasetManifest,
                      clouds: dict[str, dataio.PointCloud] | None = None,
                      split: str = "test", misalign_deg: float = 45.0,
                      n_points: int = 2000, nms_radius: float = 0.2,
                      seed: int = 0) -> CategoryEvaluation:
    """Predict on a split and compute the full metric suite.

    Test instances are misaligned the same way training instances were
    (configurable via ``misalign_deg``). The model error uses the full slot
    set; the remaining metrics use the slots retained by suppression.
    """
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} instances")

    eval_clouds, angles, preds = [], [], []
    for i, entry in enumerate(entries):
        pc = clouds[entry.id] if clouds is not None else dataio.load_point_cloud(entry.path)
        pc = dataio.normalize(pc)
        pc = dataio.resample(pc, n_points, seed=derive_seed(seed, 11, i))
        pc, angle = dataio.random_misalign(pc, misalign_deg, seed=derive_seed(seed, 13, i))
        pred = predict(params, pc.points, seed=derive_seed(seed, 17, i))
        eval_clouds.append(pc)
        angles.append(angle)
        preds.append(pred)

    canonical_full = [p.keypoints @ geom.rotation_about_up(p.total_angle) for p in preds]
    retained = geom.nms_select(canonical_full, nms_radius)
    kept = [p.keypoints[retained] for p in preds]
    kept_canonical = [c[retained] for c in canonical_full]

    coverage = float(np.mean([coverage_metric(k, pc.points)
                              for k, pc in zip(kept, eval_clouds)]))
    scale = [float((pc.points.max(axis=0) - pc.points.min(axis=0)).max())
             for pc in eval_clouds]
    model_err = float(np.mean([model_error_metric(p.nodes, p.keypoints, s)
                               for p, s in zip(preds, scale)]))
    inclusivity = float(np.mean([inclusivity_metric(k, pc.points)
                                 for k, pc in zip(kept, eval_clouds)]))
    correspondence = correspondence_metric(kept_canonical, seed=derive_seed(seed, 19))

    sym_err = None
    if manifest.ground_truth_symmetry_normal is not None and params.mode != "none":
        sym_err = symmetry_error_metric(params.sym_normal,
                                        manifest.ground_truth_symmetry_normal)

    record = MetricsRecord(category=manifest.category, coverage_pct=coverage,
                           model_err_pct=model_err, correspondence_pct=correspondence,
                           inclusivity_pct=inclusivity, sym_err_deg=sym_err,
                           definition_nprime=len(retained))

    result = CategoryEvaluation(metrics=record, retained=retained,
                                keypoint_sets=kept, canonical_sets=kept_canonical,
                                nodes=[p.nodes for p in preds],
                                poses=[p.pose for p in preds],
                                misalign_angles=np.asarray(angles),
                                clouds=eval_clouds)
    if all(pc.labels is not None for pc in eval_clouds):
        matrix, values, score = semantic_consistency(kept, eval_clouds)
        result.semantic_matrix = matrix
        result.semantic_labels = values
        result.semantic_score = score
    if params.mode == "deformation":
        result.coeff_stats = coefficient_distribution_check([p.pose for p in preds])
    return result


def run_registration_experiment(params: CategoryParams, manifest: dataio.DatasetManifest,
                                clouds: dict[str, dataio.PointCloud] | None = None,
                                split: str = "test", misalign_deg: float = 45.0,
                                n_points: int = 2000, nms_radius: float = 0.2,
                                n_templates: int = 3, seed: int = 0) -> RegistrationResult:
    """Misalign a split, predict keypoints, and register every instance onto
    randomly chosen aligned templates (template misalignment forced to 0)."""
    entries = manifest.split(split)
    if len(entries) < n_templates + 1:
        raise ValueError("not enough instances for the registration experiment")
    rng = np.random.default_rng(derive_seed(seed, 23))
    template_ids = sorted(rng.choice(len(entries), size=n_templates, replace=False).tolist())

    sets, angles = [], []
    for i, entry in enumerate(entries):
        pc = clouds[entry.id] if clouds is not None else dataio.load_point_cloud(entry.path)
        pc = dataio.normalize(pc)
        pc = dataio.resample(pc, n_points, seed=derive_seed(seed, 11, i))
        if i in template_ids:
            angle = 0.0
        else:
            pc, angle = dataio.random_misalign(pc, misalign_deg,
                                               seed=derive_seed(seed, 13, i))
        pred = predict(params, pc.points, seed=derive_seed(seed, 17, i))
        sets.append(pred.keypoints)
        angles.append(angle)

    canonical = [s @ geom.rotation_about_up(a) for s, a in zip(sets, angles)]
    retained = geom.nms_select(canonical, nms_radius)
    kept = [s[retained] for s in sets]
    return registration_experiment(kept, template_ids, angles)
