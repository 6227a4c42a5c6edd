"""
Tiny end-to-end run
===================

Build a handful of synthetic clips, train every stage for a few steps and
generate a short video. Nothing here is trained well; the point is to see
the shapes and the moving parts in well under a minute.
"""

import numpy as np
import torch

from lipflow import data, evalbench, pipeline
from lipflow.backbone import BackboneConfig
from lipflow.codec import CodecConfig

torch.set_num_threads(1)

# %%
# A small config: 17 pixel frames per training window is 3 latent frames
# at temporal ratio 8.
cfg = pipeline.ExperimentConfig(
    codec=CodecConfig(hidden=16),
    backbone=BackboneConfig(blocks=1, width=32, heads=2),
    clip_frames=17, corpus_frames=41, corpus_clips=8,
    codec_epochs=2, speechae_epochs=2, stage2_steps=50, stage2_lr=1e-3, batch_size=8,
)
corpus = data.corpus_in_memory(cfg.corpus_clips, seed=cfg.corpus_seed, n_frames=cfg.corpus_frames)
print("videos", corpus.videos.shape, "features", corpus.features.shape)

# %%
# The mouth region equals the envelope, frame by frame.
spec = corpus.specs[0]
print("mouth vs envelope r =", evalbench.pearson(data.mouth_intensity(corpus.videos[0], spec.mouth),
                                                 corpus.envelopes[0]))

# %%
# Stage 1 trains the codec and pretrains the speech autoencoder, stage 2
# the backbone.
stage1 = pipeline.train_stage1(cfg, corpus)
stage2 = pipeline.train_stage2(cfg, stage1, corpus, log_every=0)
print("stage-2 loss first/last:", stage2.metadata["stage2_loss"][0], stage2.metadata["stage2_loss"][-1])

# %%
# Generate 30 frames (rounded up to whole overlapping clips, then trimmed).
system = pipeline.System.from_checkpoint(stage2)
res = pipeline.generate_video(system, corpus.features[0], corpus.references[0], n_frames=30, steps=4)
print(res.video.shape, res.info["clips"], "clips,", res.calls, "backbone calls")
print("pixel range", float(np.min(res.video)), float(np.max(res.video)))
