"""
One attack run, round by round
==============================

A shortened schedule (two rounds) of the WGAN-GP critic with the VAE
generator promoting item 1419. Each round alternates adversarial training,
attack epochs through the unrolled surrogate, then injects a fresh batch of
50 fake profiles and retrains the victim from scratch.
"""
from sideshill import ExperimentConfig, run_single
from sideshill.pipeline import emit_plots

cfg = ExperimentConfig(targets=(1419,), rounds=2, victims=("rsattae",), out="runs/demo_attack")
res = run_single(cfg, 1419, seed=0)

for rec in res.records:
    m = rec.metrics
    print(f"round {rec.round}: HR@5={m.hr_at_k[1419]:.4f}  ECOD AUROC={m.ecod_auroc:.3f}  "
          f"TVD={m.tvd:.3f}  JS={m.js:.4f}  FAP P/R={m.fap_precision:.3f}/{m.fap_recall:.3f}")
print(f"attack training took {res.attack_seconds:.0f}s of {res.seconds:.0f}s")

# every fake rates the target 5 and at most 36 other items
batch = res.batches[-1]
print("ratings per fake profile:", batch.ratings.row_nnz().tolist())

for path in emit_plots(res.records, "runs/demo_attack/plots"):
    print("wrote", path)
