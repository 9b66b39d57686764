"""
Masked-autoencoder pre-training on synthetic radiographs
========================================================

Generate pseudo-radiographs, hide 90% of the patches, and train the encoder
and a light decoder to paint the hidden patches back. Writes reconstruction
grids to ``demo_out/``.
"""

from pathlib import Path

import numpy as np

from maelab.data import SyntheticSpec, eval_transform, generate_synthetic
from maelab.engine import build_mae, desk_config, pretrain
from maelab.mae import keep_count, make_mask_plan, masked_psnr
from maelab.plots import save_image_grid, save_line_chart, to_uint8
from maelab.vit import patchify, unpatchify

out = Path("demo_out")
out.mkdir(exist_ok=True)

# a synthetic chest-like image: lung fields, ribs and up to four lesion types
img, labels, boxes = generate_synthetic(SyntheticSpec(seed=0), 0)
print("labels:", labels, "boxes:", boxes)

# at a 0.9 ratio the encoder only sees 6 of the 64 patches
print("kept tokens per image:", keep_count(64, 0.9))

# a short run: 128 images, 60 epochs
cfg = desk_config("pretrain", **{"data.n_train": 128, "schedule.total_epochs": 60, "schedule.warmup_epochs": 5})
result = pretrain(cfg)
print(f"masked MSE {result.initial_loss:.3f} -> {result.losses[-1]:.3f}")
save_line_chart(out / "pretrain_loss.png", {"masked MSE": result.losses}, title="pre-training loss")

# reconstruct a held-out image at several masking ratios
mae = build_mae(result.checkpoint)
x = eval_transform(generate_synthetic(SyntheticSpec(seed=0), 1_000_001)[0], cfg.augment)[None]
lo, hi = float(x.min()), float(x.max())
rows = []
for ratio in (0.75, 0.9):
    plan = make_mask_plan(64, ratio, 1, np.random.default_rng(0))
    recon = mae.reconstruct(x, plan)
    masked = patchify(x, 4).copy()
    masked[0, plan.mask_indices[0]] = lo
    masked = unpatchify(masked, 4, (8, 8), 3)
    print(f"ratio {ratio:.2f}: masked-patch PSNR {masked_psnr(recon, x, plan, 4, hi - lo):.2f} dB")
    rows.append([to_uint8(v[0].mean(axis=0), lo, hi) for v in (x, masked, recon)])
save_image_grid(out / "reconstructions.png", rows)
print("wrote", out / "reconstructions.png")
