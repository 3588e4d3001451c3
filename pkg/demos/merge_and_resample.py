"""Shrink a slide in two steps: window merging, then Top-K latent resampling.

Run: python demos/merge_and_resample.py
"""

import torch

from slidecompress.resampler import ResamplerConfig, build_resampler, coverage_metric, encode
from slidecompress.slide_io import synthesize_corpus
from slidecompress.stm import SparseTokenMerger, merge

slide = synthesize_corpus(1, grid=(24, 24), dim=32, seed=3)[0]
print(f"input: {slide.n_tiles} tiles of dim {slide.dim}")

for s in (2, 3, 4):
    merged = merge(slide, SparseTokenMerger(32, s))
    print(f"  window {s}x{s}: {merged.n_tokens} tokens")

merged = merge(slide, SparseTokenMerger(32, 2))
cfg = ResamplerConfig(in_dim=32, dim=32, n_latents=16, heads=4, topk_start=(32, 16), topk_end=(16, 8))
model = build_resampler(cfg, seed=0)
with torch.no_grad():
    bundle = encode(model, merged)
print(f"latents: {tuple(bundle.latents.shape)}")
for i, keep in enumerate(bundle.keep_masks):
    print(f"  block {i}: each latent attends to at most {int(keep.sum(-1).max())} tokens")
print(f"tokens reached by some latent: {100 * coverage_metric(bundle, 1e-4):.1f}%")
