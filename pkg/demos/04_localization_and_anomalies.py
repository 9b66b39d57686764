"""
Grad-CAM boxes and reconstruction-difference maps
=================================================

Two ways of asking a trained model where it looks. Grad-CAM turns class
evidence into a heatmap and then a box; an MAE trained on normal anatomy
"heals" foreign objects, so the difference between input and reconstruction
lights them up.
"""

from pathlib import Path

import numpy as np

from maelab.data import SyntheticSpec, eval_transform, generate_synthetic, inject_anomaly
from maelab.engine import build_mae, build_vit, desk_config, finetune, load_dataset, pretrain
from maelab.explain import ap_table, anomaly_map, grad_cam, heatmap_to_box, save_heatmap_png
from maelab.metrics import iou

out = Path("demo_out")
out.mkdir(exist_ok=True)

# -- Grad-CAM on a fine-tuned classifier ------------------------------------------------
ft_cfg = desk_config("finetune", **{"schedule.total_epochs": 40})
train, held_out = load_dataset(ft_cfg, "train"), load_dataset(ft_cfg, "eval")
vit_ckpt = finetune(ft_cfg, None, train, held_out).checkpoint
vit = build_vit(vit_ckpt)
ious = {}
for i in range(60):
    image, boxes = held_out.images[i], held_out.boxes[i]
    for c, gt in boxes:
        cam = grad_cam(vit, eval_transform(image, ft_cfg.augment), c)
        pred = heatmap_to_box(cam)
        ious.setdefault(f"class_{c}", []).append(0.0 if pred is None else iou(pred, gt))
        if i == 0:
            save_heatmap_png(out / f"gradcam_{c}.png", cam.values)
print(f"{'Class':<10}{'cases':>7}{'AP25':>8}{'AP50':>8}")
for name, n, ap25, ap50 in ap_table(dict(sorted(ious.items()))):
    print(f"{name:<10}{n:>7}{ap25:>8.1f}{ap50:>8.1f}")

# -- anomaly maps from an MAE that only saw healthy backgrounds -------------------------
pre_cfg = desk_config("pretrain", **{"data.lesion_free": True, "schedule.total_epochs": 120})
mae = build_mae(pretrain(pre_cfg).checkpoint)
healthy = SyntheticSpec(seed=7).lesion_free()
rng = np.random.default_rng(0)
for i in range(5):
    image, box = inject_anomaly(generate_synthetic(healthy, 2_000_000 + i)[0], rng)
    amap = anomaly_map(mae, eval_transform(image, pre_cfg.augment), strategy="ensemble", k=10,
                       rng=np.random.default_rng(i)).values
    inside = np.zeros(amap.shape, bool)
    inside[box.y:box.y + box.h, box.x:box.x + box.w] = True
    print(f"image {i}: inside/outside mean difference {amap[inside].mean() / amap[~inside].mean():.1f}x")
    save_heatmap_png(out / f"anomaly_{i}.png", amap)
