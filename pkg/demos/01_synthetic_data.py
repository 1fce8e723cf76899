"""Generate the built-in synthetic categories and inspect their guarantees.

The table and chair archetypes are exactly mirror-symmetric about the x = 0
plane (every point has its reflected twin). The biped archetype is
different: each instance is asymmetric because its limbs swing
independently, but left and right swings are drawn from one distribution,
so the category's pose space is closed under mirroring.
"""

import numpy as np

from symkp import (SyntheticCategorySpec, generate_synthetic_category, normalize,
                   chamfer, save_xyz)

spec = SyntheticCategorySpec("table_like", instance_count=5,
                             points_per_instance=1000, seed=7)
manifest, clouds = generate_synthetic_category(spec)
print(f"category {manifest.category!r}: {len(clouds)} instances, "
      f"splits {[e.split for e in manifest.instances]}")
print("ground-truth mirror-plane normal:", manifest.ground_truth_symmetry_normal)

mirror = np.array([-1.0, 1.0, 1.0])
for cid, pc in clouds.items():
    gap = chamfer(pc.points, pc.points * mirror)
    print(f"  {cid}: {len(pc)} points, labels {sorted(set(pc.labels.tolist()))}, "
          f"mirror chamfer {gap:.2e}")

first = normalize(next(iter(clouds.values())))
print("after normalize: coordinate range",
      first.points.min(axis=0).round(3), "to", first.points.max(axis=0).round(3))
save_xyz(first, "/tmp/symkp_demo_table.xyz")
print("wrote /tmp/symkp_demo_table.xyz")

biped = SyntheticCategorySpec("sym_deform_biped", instance_count=20,
                              points_per_instance=800, seed=3)
_, biped_clouds = generate_synthetic_category(biped)
asym = [chamfer(pc.points, pc.points * mirror) / len(pc) for pc in biped_clouds.values()]
print(f"\nbiped instances asymmetric: per-point mirror gap "
      f"median {np.median(asym):.4f} (exactly symmetric shapes would give 0)")
