"""Train a small model on a synthetic table category and run the metric suite.

This is a miniature of the full workflow (fewer instances, points, and
epochs than a real run, so it finishes in about a minute). For a proper
run, scale up instance_count, points, and epochs, or use the command line:

    symkp synth --archetype table_like --count 236 --seed 7 --out data/
    symkp train --manifest data/manifest.json --epochs 60 --batch-size 8 --out runs/table
    symkp eval  --checkpoint runs/table/checkpoint.cskp --manifest data/manifest.json --out runs/table
"""

import numpy as np

from symkp import (SyntheticCategorySpec, TrainConfig, generate_synthetic_category,
                   evaluate_category, train)

spec = SyntheticCategorySpec("table_like", instance_count=40,
                             points_per_instance=600, seed=7)
manifest, clouds = generate_synthetic_category(spec)

config = TrainConfig(epochs=25, batch_size=4, n_points=600, n_nodes=16, k_basis=8,
                     mode="instance", misalign_deg=45.0, seed=0)
params, log = train(manifest, config, clouds=clouds, verbose=True)

first = np.mean([r["total"] for r in log if r["epoch"] == 0])
last = np.mean([r["total"] for r in log if r["epoch"] == config.epochs - 1])
print(f"\nloss {first:.3f} -> {last:.3f}")
print("learned mirror-plane normal:", params.sym_normal.round(4),
      "(ground truth is [1, 0, 0])")

result = evaluate_category(params, manifest, clouds=clouds, misalign_deg=45.0,
                           n_points=600, seed=1)
m = result.metrics
print(f"\ncoverage        {m.coverage_pct:6.2f} %")
print(f"model error     {m.model_err_pct:6.2f} %")
print(f"correspondence  {m.correspondence_pct:6.2f} %")
print(f"inclusivity     {m.inclusivity_pct:6.2f} %")
print(f"symmetry error  {m.sym_err_deg:6.2f} deg")
print(f"keypoints kept  {m.definition_nprime} of {params.n_nodes}")
if result.semantic_score is not None:
    print(f"semantic consistency {result.semantic_score:6.2f} %")
