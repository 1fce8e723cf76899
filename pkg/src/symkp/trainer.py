"""End-to-end unsupervised training loop.

Each epoch shuffles the training instances, re-draws a random up-axis
misalignment per instance (augmentation), runs the forward graph, and
accumulates the batch-mean gradient before one Adam step per batch. The
learning rate halves every 40 epochs by default. Every random draw is
keyed off the config seed, so identical invocations produce bitwise
identical logs and checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .losses import LossWeights, loss_terms, DEFAULT_HUBER_DELTA
from .model import (CategoryParams, CheckpointError, build_forward, checkpoint_bytes,
                    init_category_params, leaves_from_params, params_from_checkpoint_bytes,
                    params_from_leaves)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_COLUMNS = ("epoch", "step", "lr", "L_chf", "L_cov", "L_inc", "total")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 40
    mode: str = "instance"
    k_basis: int = 8
    n_nodes: int = 16
    k_neighbors: int = 8
    n_points: int = 2000
    misalign_deg: float = 45.0
    weights: LossWeights = field(default_factory=LossWeights)
    huber_delta: float = DEFAULT_HUBER_DELTA
    seed: int = 0
    checkpoint_every: int = 0   # epochs between checkpoints; 0 = final only


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step-decayed learning rate for a zero-based epoch index."""
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


def derive_seed(base: int, *keys: int) -> int:
    """Stable per-purpose sub-seed."""
    ss = np.random.SeedSequence([base, *keys])
    return int(ss.generate_state(1)[0])


_PURPOSE = {"resample": 1, "shuffle": 2, "misalign": 3, "fps": 4}


def load_training_clouds(manifest: dataio.DatasetManifest, config: TrainConfig,
                         clouds: dict[str, dataio.PointCloud] | None = None,
                         split: str = "train") -> list[dataio.PointCloud]:
    """Normalized, fixed-size training clouds in manifest order. Resampling
    happens once at load, not per epoch, so runs are reproducible."""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} instances")
    out = []
    for i, entry in enumerate(entries):
        pc = clouds[entry.id] if clouds is not None else dataio.load_point_cloud(entry.path)
        pc = dataio.normalize(pc)
        seed = derive_seed(config.seed, _PURPOSE["resample"], i)
        out.append(dataio.resample(pc, config.n_points, seed=seed))
    return out


def _adam_step(named_leaves, state, lr: float) -> None:
    state["t"] += 1
    t = state["t"]
    for name, leaf in named_leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        state["m"][name] = ADAM_BETA1 * state["m"][name] + (1 - ADAM_BETA1) * g
        state["v"][name] = ADAM_BETA2 * state["v"][name] + (1 - ADAM_BETA2) * g * g
        m_hat = state["m"][name] / (1 - ADAM_BETA1 ** t)
        v_hat = state["v"][name] / (1 - ADAM_BETA2 ** t)
        leaf.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train(manifest: dataio.DatasetManifest, config: TrainConfig,
          clouds: dict[str, dataio.PointCloud] | None = None,
          out_dir: str | Path | None = None, verbose: bool = False
          ) -> tuple[CategoryParams, list[dict]]:
    """Train category parameters from scratch.

    ``clouds`` optionally supplies in-memory instances keyed by id,
    bypassing the manifest paths. When ``out_dir`` is given the per-step
    loss log (CSV) and checkpoints are written there.

    Returns the trained parameters and the log rows.
    """
    train_clouds = load_training_clouds(manifest, config, clouds)
    params = init_category_params(config.n_nodes, config.k_basis, config.mode,
                                  seed=config.seed, k_neighbors=config.k_neighbors)
    leaves = leaves_from_params(params, requires_grad=True)
    named = list(leaves.items())
    state = {"t": 0,
             "m": {n: np.zeros_like(l.data) for n, l in named},
             "v": {n: np.zeros_like(l.data) for n, l in named}}

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    log_rows: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng(
            derive_seed(config.seed, _PURPOSE["shuffle"], epoch)).permutation(len(train_clouds))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for leaf in leaves.values():
                leaf.zero_grad()
            sums = {"chamfer": 0.0, "coverage": 0.0, "inclusivity": 0.0, "total": 0.0}
            for i in batch:
                pc = train_clouds[i]
                misaligned, _ = dataio.random_misalign(
                    pc, config.misalign_deg,
                    seed=derive_seed(config.seed, _PURPOSE["misalign"], epoch, int(i)))
                # re-seeding the farthest-point draw each epoch exposes the
                # offset head to node-seeding variation, so test-time
                # placements do not inherit one draw's sampling noise
                out = build_forward(params, leaves, misaligned.points,
                                    seed=derive_seed(config.seed, _PURPOSE["fps"],
                                                     epoch, int(i)))
                terms = loss_terms(out["nodes"], out["keypoints"], misaligned.points,
                                   config.weights, config.huber_delta)
                if not np.isfinite(terms["total"].data):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step} on instance "
                        f"{pc.id!r}: chf={float(terms['chamfer'].data)} "
                        f"cov={float(terms['coverage'].data)} "
                        f"inc={float(terms['inclusivity'].data)}")
                for key in sums:
                    sums[key] += float(terms[key].data)
                (terms["total"] * (1.0 / len(batch))).backward()
            _adam_step(named, state, lr)
            normal = leaves["sym_normal"].data
            normal /= np.linalg.norm(normal)
            row = {"epoch": epoch, "step": step, "lr": lr,
                   "L_chf": sums["chamfer"] / len(batch),
                   "L_cov": sums["coverage"] / len(batch),
                   "L_inc": sums["inclusivity"] / len(batch),
                   "total": sums["total"] / len(batch)}
            log_rows.append(row)
            step += 1
        if verbose and (epoch % 10 == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:4d}  lr {lr:.2e}  total {log_rows[-1]['total']:.6f}")
        if (out_path is not None and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0):
            save_checkpoint(params_from_leaves(params, leaves),
                            out_path / f"checkpoint_epoch{epoch + 1:04d}.cskp")

    final = params_from_leaves(params, leaves)
    if out_path is not None:
        write_log(log_rows, out_path / "train_log.csv")
        save_checkpoint(final, out_path / "checkpoint.cskp")
    return final, log_rows


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"], row["step"], repr(row["lr"]),
                             repr(row["L_chf"]), repr(row["L_cov"]),
                             repr(row["L_inc"]), repr(row["total"])])


def save_checkpoint(params: CategoryParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> CategoryParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return params_from_checkpoint_bytes(data)


def config_with(config: TrainConfig, **updates) -> TrainConfig:
    return replace(config, **updates)
