"""
Fine-tuning from MAE weights versus from scratch
================================================

Pre-train once, then fine-tune two classifiers on the same multi-label task
with the same seed and budget: one starts from the MAE encoder, the other
from random weights. A linear probe on each encoder follows.
"""

from maelab.engine import desk_config, finetune, linear_probe, load_dataset, pretrain

# fine-tune split and held-out split (held-out indices start at one million)
ft_cfg = desk_config("finetune", **{"schedule.total_epochs": 40})
train, held_out = load_dataset(ft_cfg, "train"), load_dataset(ft_cfg, "eval")
print("class prevalence in train:", train.labels.mean(axis=0).round(3))

# pre-train on the training images; labels are never used here
ckpt = pretrain(desk_config("pretrain", **{"schedule.total_epochs": 120}), train).checkpoint

# identical budget and seed for both starts
mae_run = finetune(ft_cfg, ckpt, train, held_out)
rnd_run = finetune(ft_cfg, None, train, held_out)
print("MAE init   :", mae_run.final_report.summary())
print("random init:", rnd_run.final_report.summary())

# mAUC every 10 epochs
for epoch in range(9, ft_cfg.epochs, 10):
    print(f"epoch {epoch + 1:3d}  MAE {mae_run.reports[epoch].mean_auc:.3f}  "
          f"random {rnd_run.reports[epoch].mean_auc:.3f}")

# a linear probe only trains the head, so it measures the frozen features directly
lp_cfg = desk_config("linprobe")
print(f"probe on MAE encoder   : {linear_probe(lp_cfg, ckpt, train, held_out).final_report.mean_auc:.3f}")
print(f"probe on random encoder: {linear_probe(lp_cfg, None, train, held_out).final_report.mean_auc:.3f}")
