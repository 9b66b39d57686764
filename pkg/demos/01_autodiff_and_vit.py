"""
Gradients and a tiny vision transformer
=======================================

Build a small ViT on the in-house autodiff engine, check its gradients
against finite differences, and look at how the patch grid maps to tokens.
"""

import numpy as np

from maelab import autodiff as ad
from maelab.vit import VisionTransformer, param_count, patchify, preset

# every op records a backward closure; grad_check compares against central differences
x = np.random.default_rng(0).standard_normal((4, 6))
err = ad.grad_check(lambda t: ad.tsum(ad.gelu(t) * ad.softmax(t)), x)
print(f"gelu * softmax: relative gradient error {err:.2e}")

# analytic parameter counts for the published sizes (1000-way head)
for name in ("vit_small_patch16", "vit_base_patch16"):
    print(f"{name}: {param_count(preset(name, num_classes=1000)) / 1e6:.1f}M parameters")

# the desk preset used throughout: 32 px input, 4 px patches -> an 8 x 8 token grid
cfg = preset("vit_desk", num_classes=4)
vit = VisionTransformer(cfg, seed=0)
print(f"vit_desk: {cfg.num_patches} tokens, width {cfg.width}, depth {cfg.depth}, "
      f"{vit.num_parameters():,} parameters")

# patches are flattened row-major across the grid
images = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
tokens = patchify(images, cfg.patch_size)
print("patch tensor:", tokens.shape)

# the head starts at zero, so every logit is zero before training
logits = vit(images)
print("initial logits:", logits.data[0])

# one backward pass through the whole model
vit.params["head.w"].data[:] = 0.01
loss = ad.bce_with_logits(vit(images), np.array([[1, 0, 0, 1], [0, 1, 0, 0]], dtype=np.float32))
loss.backward()
g = vit.params["blocks.0.attn.qkv.w"].grad
print(f"loss {loss.item():.4f}; |grad| of the first attention projection {np.linalg.norm(g):.3e}")

# count multiply-accumulates for a forward pass
with ad.count_flops() as flops:
    vit(images)
print(f"forward MACs for a batch of 2: {flops[0]:,}")
