"""
Learning a second dataset without forgetting the first
======================================================

The model trains on dataset A, then on dataset B. Retention is the
Rank-1 on A after the second stage divided by the Rank-1 right after the
first. DataFree sees only B in stage two; Replay also keeps one exemplar
image per identity of A and mixes groups of them into every batch.
"""

from camnorm import experiments

datasets = experiments.preset_datasets("incremental")
print("sequence:", " -> ".join(ds.name for ds in datasets))

for norm in ("bn", "cbn"):
    for mode in ("datafree", "replay"):
        report = experiments.incremental(datasets, norm, mode, seed=0)
        stage2 = report["stages"][1]
        extra = f"  memory {stage2['memory_sizes']}" if "memory_sizes" in stage2 else ""
        print(f"{norm.upper():3s} {report['mode']:8s} retention {report['retention']['rank1'][1]:.3f}"
              f"  (warm-up {stage2['warmup']['iterations']} steps){extra}")

# the classifier warm-up can be skipped to see what it buys
report = experiments.incremental(datasets, "cbn", "datafree", seed=0, warmup=False)
print("CBN DataFree without warm-up:", round(report["retention"]["rank1"][1], 3))
