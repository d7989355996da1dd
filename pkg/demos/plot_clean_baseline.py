"""
Clean baseline: the targets are never recommended
==================================================

Train the attention autoencoder recommender on clean ML-100K and check that
none of the five target items reaches any eligible user's top-5 list. Any
hit ratio measured after an attack is therefore caused by the fake profiles.
"""
import numpy as np

from sideshill import load_dataset, train_victim
from sideshill.evaluation import eligible_users, hit_ratio_at_k

ds = load_dataset("data/ml-100k")
print(f"{ds.n_users} users, {ds.n_items} items, {ds.ratings.nnz} ratings")

# feedforward regression head on [z_u; z_i; x_u; x_i]
victim = train_victim("rsattae", ds, seed=0)

for raw in (62, 785, 1077, 1257, 1419):
    t = ds.item_index(raw)
    users = eligible_users(ds.ratings.csr, t)
    n_ratings = int((ds.ratings.column(t) > 0).sum())
    hr = hit_ratio_at_k(victim, t, 5, users)
    print(f"item {raw:5d}: {n_ratings:3d} ratings, HR@5 = {hr:.4f} over {len(users)} users")

# typical top-5 lists are dominated by popular, highly rated items
top = np.argsort(-victim.score_matrix(np.arange(3)), axis=1)[:, :5]
print("first users' unfiltered top-5 item ids:", ds.item_ids[top].tolist())
