"""
Direct transfer to unseen cameras
=================================

Train on cameras 0-3, test on cameras 4-7 that were never seen during
training. The BN model keeps its training-time running moments (or
re-estimates one dataset-wide set with AdaBN); the CBN model estimates
fresh moments for each test camera from a few unlabeled mini-batches.
"""

from camnorm import experiments
from camnorm.evaluation import random_feature_report
from camnorm.numerics import RngStream

ds = experiments.preset_datasets("direct-transfer")[0]
print(ds.name, "train cameras", ds.split_cameras("train"), "test cameras", ds.split_cameras("query", "gallery"))

rows = experiments.direct_transfer(ds, seeds=[0])
for key, label in [("bn", "BN, running stats"), ("bn_adabn", "BN + AdaBN"), ("cbn", "CBN, per camera")]:
    m = rows[0][key]
    print(f"{label:18s} Rank-1 {100 * m['rank1']:5.1f}   mAP {100 * m['mAP']:5.1f}")

chance = random_feature_report(ds, 32, RngStream(0))
print(f"{'random features':18s} Rank-1 {100 * chance.rank1:5.1f}   mAP {100 * chance.mAP:5.1f}")
