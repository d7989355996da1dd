"""
What the detectors see
======================

Compare three kinds of 50-user injections that all rate item 1419 with 5:
copies of real template rows, random ratings on the same items, and maximal
"push" profiles that rate every filler 5. ECOD works on per-user summaries
(SVD embedding, count, mean, spread, side features) and FAP propagates
suspicion from a few known fakes through shared items. FAP uses binary
edges, so the three injections look identical to it: only the rated item
sets matter, and those are the same here.
"""
import numpy as np

from sideshill import ProfileBatch, RatingMatrix, SideFeatureTable, inject, load_dataset, sample_templates
from sideshill.evaluation import ecod_auroc, fap_detect, rating_divergences

ds = load_dataset("data/ml-100k")
target = ds.item_index(1419)
templates = sample_templates(ds, 50, "uniform", cap=36, target=target, seed=0)
rng = np.random.default_rng(0)


def batch_from(rows):
    rows = np.asarray(rows, dtype=np.int8).copy()
    rows[:, target] = 5
    feats = SideFeatureTable(ds.user_features.values[templates.users])
    return ProfileBatch(RatingMatrix.from_dense(rows), feats, templates.users, target, 36)


mask = templates.rows > 0
kinds = {
    "template copies": templates.rows,
    "random values": mask * rng.integers(1, 6, size=mask.shape),
    "all fives": mask * 5,
}
for name, rows in kinds.items():
    batch = batch_from(rows)
    poisoned = inject(ds, batch)
    fakes = np.arange(ds.n_users, poisoned.n_users)
    fap = fap_detect(poisoned.ratings.csr, fakes)
    tvd, js = rating_divergences(ds.ratings.csr, batch.ratings.csr)
    print(f"{name:16s} ECOD AUROC={ecod_auroc(poisoned, fakes):.3f}  FAP P/R={fap.precision:.3f}/"
          f"{fap.recall:.3f}  TVD={tvd:.3f}  JS={js:.4f}")
