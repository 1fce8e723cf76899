"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic category), ``train`` (fit category
parameters), ``infer`` (ordered keypoints for clouds), ``eval`` (metric
suite with CSV and SVG outputs), ``register`` (similarity registration of
keypoint files onto templates). Every run echoes its effective
configuration to ``run.json`` in the output directory; all randomness is
keyed off ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, geom
from .evaluation import evaluate_category, registration_experiment
from .losses import LossWeights
from .model import CheckpointError, predict
from .trainer import (TrainConfig, TrainingDivergedError, derive_seed, load_checkpoint,
                      train)

DEFAULT_OUT_ENV = "SYMKP_OUT"


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else os.environ.get(DEFAULT_OUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(args, out: Path) -> None:
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    for k, v in doc.items():
        if isinstance(v, Path):
            doc[k] = str(v)
        elif isinstance(v, list):
            doc[k] = [str(x) for x in v]
    with open(out / "run.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_keypoints(path, slot_indices, keypoints) -> None:
    """One ``index x y z`` line per retained keypoint slot."""
    with open(path, "w") as fh:
        for j, p in zip(slot_indices, np.asarray(keypoints, float)):
            fh.write(f"{int(j)} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_keypoints(path) -> tuple[np.ndarray, np.ndarray]:
    indices, pts = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise dataio.ParseError(f"{path}:{lineno}: expected 'index x y z'")
            indices.append(int(fields[0]))
            pts.append([float(v) for v in fields[1:]])
    order = np.argsort(indices, kind="stable")
    return np.asarray(indices)[order], np.asarray(pts, float)[order]


def _save_heatmap_svg(matrix, path, xlabel: str, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _save_scatter_svg(values, path, xlabel: str, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    values = np.asarray(values, float)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.scatter(np.arange(len(values)), values, s=12)
    if len(values):
        ax.axhline(values.mean(), color="tab:red", lw=1, label="mean")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _save_bars_svg(groups: dict[str, np.ndarray], path, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, len(groups), figsize=(4 * len(groups), 3), squeeze=False)
    for ax, (name, values) in zip(axes[0], groups.items()):
        ax.bar(np.arange(len(values)), values)
        ax.set_title(name)
        ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = dataio.SyntheticCategorySpec(
        archetype=args.archetype, instance_count=args.count,
        points_per_instance=args.points, seed=args.seed,
        train_fraction=args.train_fraction)
    manifest, clouds = dataio.generate_synthetic_category(spec)
    for entry in manifest.instances:
        dataio.save_xyz(clouds[entry.id], out / entry.path)
    dataio.save_manifest(manifest, out / "manifest.json")
    _write_run_config(args, out)
    print(f"wrote {len(clouds)} instances and manifest.json to {out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        decay_factor=args.decay_factor, decay_every=args.decay_every,
        mode=args.mode, k_basis=args.k_basis, n_nodes=args.n_nodes,
        k_neighbors=args.k_neighbors, n_points=args.points,
        misalign_deg=args.misalign_deg,
        weights=LossWeights(w_chf=args.w_chf, w_cov=args.w_cov, w_inc=args.w_inc),
        huber_delta=args.huber_delta, seed=args.seed,
        checkpoint_every=args.checkpoint_every)


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = dataio.load_manifest(args.manifest)
    config = _train_config(args)
    _write_run_config(args, out)
    train(manifest, config, out_dir=out, verbose=not args.quiet)
    print(f"wrote checkpoint.cskp and train_log.csv to {out}")
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    params = load_checkpoint(args.checkpoint)
    preds, names = [], []
    for i, path in enumerate(args.clouds):
        pc = dataio.normalize(dataio.load_point_cloud(path))
        pc = dataio.resample(pc, args.points, seed=derive_seed(args.seed, 11, i))
        preds.append(predict(params, pc.points, seed=derive_seed(args.seed, 17, i)))
        names.append(Path(path).stem)
    canonical = [p.keypoints @ geom.rotation_about_up(p.total_angle) for p in preds]
    retained = geom.nms_select(canonical, args.nms_radius)
    for name, pred in zip(names, preds):
        write_keypoints(out / f"{name}_keypoints.xyz", retained, pred.keypoints[retained])
    with open(out / "retained_indices.txt", "w") as fh:
        fh.writelines(f"{j}\n" for j in retained)
    _write_run_config(args, out)
    print(f"kept {len(retained)} of {params.n_nodes} keypoint slots; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    params = load_checkpoint(args.checkpoint)
    manifest = dataio.load_manifest(args.manifest)
    result = evaluate_category(params, manifest, misalign_deg=args.misalign_deg,
                               n_points=args.points, nms_radius=args.nms_radius,
                               seed=args.seed)
    from .evaluation import METRICS_CSV_HEADER
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        writer.writerow(result.metrics.csv_row())
    if result.semantic_matrix is not None:
        with open(out / "semantic_cooccurrence.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slot"] + [str(v) for v in result.semantic_labels])
            for j, row in enumerate(result.semantic_matrix):
                writer.writerow([result.retained[j]] + [f"{v:.4f}" for v in row])
        _save_heatmap_svg(result.semantic_matrix, out / "semantic_cooccurrence.svg",
                          xlabel="part label", ylabel="keypoint slot")
    if result.coeff_stats is not None:
        st = result.coeff_stats
        with open(out / "coefficient_distribution.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["component", "mean_c", "var_c", "mean_c_mirror", "var_c_mirror"])
            for k in range(len(st.mean_c)):
                writer.writerow([k, st.mean_c[k], st.var_c[k],
                                 st.mean_c_mirror[k], st.var_c_mirror[k]])
        _save_bars_svg({"coefficient variance": st.var_c,
                        "mirror coefficient variance": st.var_c_mirror},
                       out / "coefficient_distribution.svg", ylabel="variance")
    _write_run_config(args, out)
    m = result.metrics
    print(f"coverage {m.coverage_pct:.2f}%  model_err {m.model_err_pct:.2f}%  "
          f"correspondence {m.correspondence_pct:.2f}%  inclusivity {m.inclusivity_pct:.2f}%  "
          f"sym_err {'n/a' if m.sym_err_deg is None else f'{m.sym_err_deg:.2f} deg'}  "
          f"N'={m.definition_nprime}")
    return 0


def cmd_register(args) -> int:
    out = _out_dir(args)
    instance_paths = [Path(p) for p in args.keypoints]
    template_paths = [Path(p) for p in args.templates]
    all_paths = template_paths + [p for p in instance_paths if p not in template_paths]
    sets = []
    for p in all_paths:
        _, pts = read_keypoints(p)
        sets.append(pts)
    gt_angles = np.zeros(len(all_paths))
    if args.gt_angles is not None:
        with open(args.gt_angles) as fh:
            table = json.load(fh)

        def lookup(stem: str) -> float:
            return float(table.get(stem, table.get(stem.removesuffix("_keypoints"), 0.0)))

        gt_angles = np.array([lookup(p.stem) for p in all_paths])

    template_ids = list(range(len(template_paths)))
    rows = []
    for i in range(len(template_paths), len(all_paths)):
        for t in template_ids:
            try:
                tf = geom.similarity_registration(sets[i], sets[t])
            except geom.DegenerateGeometryError as exc:
                rows.append({"instance": all_paths[i].stem, "template": all_paths[t].stem,
                             "error": str(exc)})
                continue
            residual = float(np.sqrt(np.mean(
                np.sum((tf.apply(sets[i]) - sets[t]) ** 2, axis=1))))
            rows.append({"instance": all_paths[i].stem, "template": all_paths[t].stem,
                         "scale": tf.scale, "rotation": tf.rotation.tolist(),
                         "translation": tf.translation.tolist(), "rms_residual": residual})
    with open(out / "transforms.json", "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    report = registration_experiment(sets, template_ids, gt_angles)
    with open(out / "registration_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean_rotation_error_deg", "pairs", "skipped"])
        writer.writerow([f"{report.mean_error_deg:.4f}", len(report.errors_deg),
                         report.skipped])
    _save_scatter_svg(report.errors_deg, out / "registration_errors.svg",
                      xlabel="instance/template pair", ylabel="rotation error (deg)")
    _write_run_config(args, out)
    print(f"mean rotation error {report.mean_error_deg:.3f} deg over "
          f"{len(report.errors_deg)} pairs ({report.skipped} skipped)")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symkp",
                                     description="Category-specific symmetric 3D keypoints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic category")
    p.add_argument("--archetype", required=True, choices=dataio.ARCHETYPES)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--train-fraction", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train category parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay-factor", type=float, default=0.5)
    p.add_argument("--decay-every", type=int, default=40)
    p.add_argument("--mode", choices=("none", "instance", "deformation"),
                   default="instance")
    p.add_argument("--k-basis", type=int, default=8)
    p.add_argument("--n-nodes", type=int, default=16)
    p.add_argument("--k-neighbors", type=int, default=8)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--misalign-deg", type=float, default=45.0)
    p.add_argument("--w-chf", type=float, default=1.0)
    p.add_argument("--w-cov", type=float, default=1.0)
    p.add_argument("--w-inc", type=float, default=2.0)
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict ordered keypoints for clouds")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nms-radius", type=float, default=0.2)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run the metric suite on a manifest's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--misalign-deg", type=float, default=45.0)
    p.add_argument("--nms-radius", type=float, default=0.2)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", help="register keypoint files onto templates")
    p.add_argument("keypoints", nargs="+")
    p.add_argument("--templates", nargs="+", required=True)
    p.add_argument("--gt-angles", default=None,
                   help="JSON mapping instance stem to misalignment angle (radians)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_register)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (dataio.PointCloudError, CheckpointError, TrainingDivergedError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
