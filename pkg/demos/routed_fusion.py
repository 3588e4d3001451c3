"""Routed cross-attention: gates start closed, routing picks M of L latents.

Run: python demos/routed_fusion.py
"""

import torch

from slidecompress.fusion import FusionConfig, ToyLmConfig, build_stack, forward_fused, text_batch
from slidecompress.slide_io import Template, generate_toy_vqa, synthesize_corpus

lm = ToyLmConfig(depth=4, width=32, heads=4, vocab=24, max_context=16, cara_layers=(1, 3))
stack = build_stack(FusionConfig(latent_dim=16, n_latents=8, route_m=3, lm=lm), seed=0)
slides = synthesize_corpus(2, grid=(8, 8), n_clusters=3, dim=16, seed=1)
samples = [generate_toy_vqa(s, Template.DOMINANT, vocab_size=24) for s in slides]
batch = text_batch(samples)
Z = torch.randn(2, 8, 16)

with torch.no_grad():
    out = forward_fused(stack, Z, batch)
    text_only = stack.lm(batch.tokens)
print("closed gates leave the LM untouched:", torch.equal(out.logits, text_only))
print("routed latent indices per sample:", out.routing.indices.tolist())

with torch.no_grad():
    for layer in stack.cara.values():
        layer.gamma.fill_(0.5)
    out = forward_fused(stack, Z, batch)
print("opened gates change logits by", f"{float((out.logits - text_only).abs().max()):.3f}")
print("loss parts:", {k: round(v, 4) for k, v in out.parts.scalars().items()})
