"""Training losses: Chamfer fit, bounding-box coverage, and inclusivity.

All three are differentiable scalars on the diffcore graph. The fit loss
ties the decoded keypoints to the node predictions without requiring any
point order; coverage matches the nodes' bounding-box volume to the
cloud's; inclusivity penalizes nodes that stray from the cloud surface.
A direct per-index l2 tie between nodes and keypoints is deliberately
absent: nothing makes the unordered nodes land in the decoded order, so
such a loss does not converge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

DEFAULT_HUBER_DELTA = 1.0


@dataclass
class LossWeights:
    w_chf: float = 1.0
    w_cov: float = 1.0
    w_inc: float = 2.0


def _as_tensor(x) -> dc.Tensor:
    return x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x, float))


def bbox_volume_graph(points) -> dc.Tensor:
    """Differentiable product of axis-aligned extents (gradient routes to
    the extreme points)."""
    points = _as_tensor(points)
    return dc.prod3(dc.sub(dc.max_over_set(points), dc.min_over_set(points)))


def chamfer_loss(nodes, keypoints) -> dc.Tensor:
    """Symmetric sum of nearest-neighbour squared distances."""
    nodes, keypoints = _as_tensor(nodes), _as_tensor(keypoints)
    return dc.add(dc.tsum(dc.min_sqdist_to_set(nodes, keypoints)),
                  dc.tsum(dc.min_sqdist_to_set(keypoints, nodes)))


def coverage_loss(nodes, cloud, delta: float = DEFAULT_HUBER_DELTA) -> dc.Tensor:
    """Huber penalty on the node-vs-cloud bounding-box volume gap."""
    nodes = _as_tensor(nodes)
    cloud_vol = float(bbox_volume_graph(dc.Tensor(np.asarray(cloud, float))).data)
    return dc.huber(dc.sub(bbox_volume_graph(nodes), cloud_vol), delta)


def inclusivity_loss(nodes, cloud) -> dc.Tensor:
    """One-sided sum of squared node-to-cloud distances; the cloud is constant."""
    nodes = _as_tensor(nodes)
    return dc.tsum(dc.min_sqdist_to_set(nodes, dc.Tensor(np.asarray(cloud, float))))


def loss_terms(nodes, keypoints, cloud, weights: LossWeights | None = None,
               delta: float = DEFAULT_HUBER_DELTA) -> dict[str, dc.Tensor]:
    """The three loss terms plus their weighted total."""
    weights = weights or LossWeights()
    terms = {
        "chamfer": chamfer_loss(nodes, keypoints),
        "coverage": coverage_loss(nodes, cloud, delta),
        "inclusivity": inclusivity_loss(nodes, cloud),
    }
    terms["total"] = dc.add(
        dc.add(dc.mul(terms["chamfer"], weights.w_chf),
               dc.mul(terms["coverage"], weights.w_cov)),
        dc.mul(terms["inclusivity"], weights.w_inc))
    return terms


def total_loss(nodes, keypoints, cloud, weights: LossWeights | None = None,
               delta: float = DEFAULT_HUBER_DELTA) -> dc.Tensor:
    return loss_terms(nodes, keypoints, cloud, weights, delta)["total"]
