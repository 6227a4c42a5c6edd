"""
Desk-scale experiments
======================

Trains every ablation arm with the desk profile (roughly an hour on one
CPU the first time; checkpoints are reused afterwards) and writes the
long-horizon, step-sweep and ablation reports to ``runs/``.

Run from the repository root::

    python notebooks/03_desk_experiments.py
"""

import logging
from pathlib import Path

import torch

from lipflow import data, evalbench, pipeline

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.set_num_threads(1)
out = Path("runs")

# %%
base = pipeline.desk_config()
corpus = data.corpus_in_memory(base.corpus_clips, seed=base.corpus_seed, n_frames=base.corpus_frames)
family = evalbench.train_family(base, out / "ckpt", ("full", "no-pretrain", "no-speechae"), (0, 1, 2), corpus,
                                log_every=500)
family.update(evalbench.train_family(base, out / "ckpt", ("no-ans",), (0,), corpus, log_every=500))

# %%
# Does quality hold up over 8 consecutive clips?
horizon = evalbench.long_horizon_eval(family["full"][0])
horizon.write(out / "reports")
print(horizon.summary())

# %%
# Steps against quality and backbone time, both guidance modes.
sweep = evalbench.runtime_sweep(family["full"][0], plot=out / "reports" / "runtime_sweep.png")
sweep.write(out / "reports")
print(sweep.summary())

# %%
# Ablations: speech encoder variants and synchronous noise with concatenation.
ablation = evalbench.ablate(family, gen_seeds=(0, 1, 2, 3, 4))
ablation.write(out / "reports")
print(ablation.summary())
for arm, row in evalbench.arm_medians(ablation).items():
    print(f"{arm:12s} sync {row['sync_proxy']:.3f}  seam {row['seam_score']:.3f}  frechet {row['latent_frechet']:.1f}")
