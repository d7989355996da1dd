"""
Rating-only ablation
====================

Side features removed, WRMF as the surrogate and NeuMF as the victim, target
item 62. Only four of the nine variants are run here to keep the demo short;
``sideshill ablate`` runs all nine. The k-means strategy draws templates from
clusters of users who like the target, which tends to make the fakes easier
for FAP to trace.
"""
from sideshill import ExperimentConfig, run_ablation
from sideshill.pipeline import ablation_config, format_ablation_table

cfg = ablation_config(ExperimentConfig(out="runs/demo"), victims=("neumf",))
rows = run_ablation(cfg, ["GAN", "GAN with k-means sampling", "WGAN-SN (VAE)",
                          "WGAN-SN (VAE) with k-means sampling"])
print(format_ablation_table(rows), end="")
