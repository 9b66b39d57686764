"""Stage orchestration: MAE pre-training, multi-label fine-tuning, linear probing.

Each stage takes a :class:`TrainRunConfig` and an in-memory dataset and
returns a :class:`Checkpoint` plus its logged curves.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    AugmentConfig,
    ArrayDataset,
    DatasetManifest,
    SyntheticSpec,
    eval_transform,
    finetune_transform,
    iterate_batches,
    pretrain_transform,
    read_manifest,
)
from .mae import DecoderConfig, MaskedAutoencoder, make_mask_plan
from .metrics import EvalReport
from .optim import (
    LayerDecayPlan,
    OptimizerConfig,
    ScheduleConfig,
    layer_decay_multipliers,
    lr_at,
    make_optimizer,
)
from .vit import VisionTransformer, VitConfig, preset

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "linprobe")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | manifest
    n_train: int = 256
    n_eval: int = 128
    synth_seed: int = 0
    n_classes: int = 4
    image_size: int = 32
    lesion_free: bool = False
    manifest: str = ""
    boxes: str = ""
    eval_manifest: str = ""
    root: str = "."


@dataclass(frozen=True)
class TrainRunConfig:
    stage: str
    model: str = "vit_small_patch16"
    vit: VitConfig = field(default_factory=lambda: preset("vit_small_patch16"))
    decoder: DecoderConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 2048
    layer_decay: float | None = None
    mask_ratio: float | None = None
    normalize_targets: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    workers: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        pre = self.stage == "pretrain"
        if pre != (self.mask_ratio is not None):
            raise ValueError("mask_ratio is required for pretrain and only for pretrain")
        if pre != (self.decoder is not None):
            raise ValueError("decoder config is required for pretrain and only for pretrain")
        if (self.stage == "finetune") != (self.layer_decay is not None):
            raise ValueError("layer_decay is required for finetune and only for finetune")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def epochs(self) -> int:
        return int(self.schedule.total_epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_flat(self) -> dict:
        return flatten(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        d["vit"] = VitConfig(**d["vit"])
        d["decoder"] = DecoderConfig(**d["decoder"]) if d.get("decoder") else None
        d["data"] = DataConfig(**d["data"])
        aug = dict(d["augment"])
        for key in ("crop_scale", "randaug", "mean", "std"):
            if aug.get(key) is not None:
                aug[key] = tuple(aug[key])
        d["augment"] = AugmentConfig(**aug)
        opt = dict(d["optim"])
        opt["betas"] = tuple(opt["betas"])
        d["optim"] = OptimizerConfig(**opt)
        d["schedule"] = ScheduleConfig(**d["schedule"])
        return cls(**d)

    def override(self, flat: dict) -> "TrainRunConfig":
        """Apply dotted-key overrides such as ``{"optim.base_lr": 1e-3}``."""
        d = self.to_dict()
        if "model" in flat:
            d["vit"] = dataclasses.asdict(preset(str(flat["model"]), num_classes=d["vit"]["num_classes"]))
        for key, value in flat.items():
            _set_dotted(d, key, value)
        return TrainRunConfig.from_dict(d)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, like):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, (list, tuple)) or "," in text:
        return [float(x) if any(c in x for c in ".e") else int(x) for x in text.strip("()[]").split(",") if x]
    if isinstance(like, str):
        return text
    try:
        return json.loads(text)
    except ValueError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    if parts[-1] not in node and len(parts) > 1 and parts[0] not in ("decoder",):
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce(value, node.get(parts[-1]))


# -- stage defaults -------------------------------------------------------------------------

def paper_config(stage: str, **overrides) -> TrainRunConfig:
    """Stage defaults at the published scale (ViT-S/16, 2048 / 16384 batches, 800 / 75 / 100 epochs)."""
    vit = preset("vit_small_patch16", num_classes=14)
    aug = AugmentConfig(crop_scale=(0.5, 1.0), hflip_prob=0.5, train_size=224, pretrain_size=256)
    if stage == "pretrain":
        cfg = TrainRunConfig(
            "pretrain", vit=vit, decoder=DecoderConfig(2, 512, 16), augment=aug,
            optim=OptimizerConfig("adamw", 1.5e-4, (0.9, 0.95), 0.05, ref_batch=2048),
            schedule=ScheduleConfig(20, 800, min_lr=0.0), batch_size=2048, mask_ratio=0.9,
        )
    elif stage == "finetune":
        cfg = TrainRunConfig(
            "finetune", vit=dataclasses.replace(vit, drop_path_rate=0.2),
            augment=dataclasses.replace(aug, randaug=(2, 6)),
            optim=OptimizerConfig("adamw", 5e-4, (0.9, 0.95), 0.05, ref_batch=256),
            schedule=ScheduleConfig(5, 75, min_lr=1e-6), batch_size=256, layer_decay=0.55,
        )
    elif stage == "linprobe":
        cfg = TrainRunConfig(
            "linprobe", vit=vit, augment=aug,
            optim=OptimizerConfig("lars", 0.1, weight_decay=0.0, momentum=0.9, ref_batch=16384),
            schedule=ScheduleConfig(10, 100, min_lr=0.0), batch_size=16384,
        )
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return cfg.override(overrides) if overrides else cfg


def desk_config(stage: str, **overrides) -> TrainRunConfig:
    """Workstation-scale variant: tiny ViT on 32 px synthetic radiographs.

    Mask ratio, crop scale, layer decay, DropPath rate, optimizer family and
    the warmup-then-cosine shape match the paper-scale defaults. Sizes,
    epochs, learning rates and RandAug strength are shrunk: at 32 px the
    full-strength RandAug erases small lesions.
    """
    base = paper_config(stage)
    vit = preset("vit_desk", num_classes=4, drop_path_rate=base.vit.drop_path_rate)
    aug = dataclasses.replace(base.augment, train_size=32, pretrain_size=32)
    data = DataConfig(n_train=256, n_eval=256, image_size=32, n_classes=4)
    common = dict(vit=vit, augment=aug, data=data, model="vit_desk")
    if stage == "pretrain":
        cfg = dataclasses.replace(
            base, **common, decoder=DecoderConfig(1, 64, 4), batch_size=32,
            optim=dataclasses.replace(base.optim, base_lr=1e-3, ref_batch=32),
            schedule=ScheduleConfig(10, 200, min_lr=0.0),
        )
    elif stage == "finetune":
        cfg = dataclasses.replace(
            base, **{**common, "augment": dataclasses.replace(aug, randaug=(1, 3))}, batch_size=32,
            optim=dataclasses.replace(base.optim, base_lr=5e-3, ref_batch=32),
            schedule=ScheduleConfig(5, 100, min_lr=1e-6),
        )
    else:
        cfg = dataclasses.replace(
            base, **common, batch_size=64,
            optim=dataclasses.replace(base.optim, base_lr=0.1, ref_batch=64),
            schedule=ScheduleConfig(5, 50, min_lr=0.0),
        )
    return cfg.override(overrides) if overrides else cfg


def load_dataset(cfg: TrainRunConfig, split: str = "train") -> ArrayDataset:
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec.with_classes(d.n_classes, seed=d.synth_seed, image_size=d.image_size)
        if d.lesion_free:
            spec = spec.lesion_free()
        if split == "train":
            return ArrayDataset.synthetic(spec, d.n_train)
        return ArrayDataset.synthetic(spec, d.n_eval, offset=1_000_000)
    if d.source == "manifest":
        path = d.manifest if split == "train" else (d.eval_manifest or d.manifest)
        manifest = read_manifest(path, d.boxes or None)
        return ArrayDataset.from_manifest(manifest, d.root)
    raise ValueError(f"unknown data source {d.source!r}")


# -- checkpoints ----------------------------------------------------------------------------

CKPT_MAGIC = b"MAELABCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        # store the config in its on-disk form (tuples become lists) so loads compare equal
        self.config = json.loads(json.dumps(self.config, sort_keys=True, default=list))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True, default=list).encode()).hexdigest()[:16]

    def to_bytes(self) -> bytes:
        """JSON header (names, shapes, dtypes, offsets, config) then a little-endian payload."""
        entries = []
        chunks = []
        offset = 0
        for group, tensors in (("param", self.tensors), ("optim", self.optimizer)):
            for name in sorted(tensors):
                arr = np.asarray(tensors[name])
                dt = "<f8" if arr.dtype == np.float64 else "<f4"
                raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
                entries.append({"group": group, "name": name, "shape": list(arr.shape),
                                "dtype": dt, "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        header = {
            "format_version": self.format_version, "step": self.step, "config": self.config,
            "config_hash": self.config_hash, "version": __version__, "tensors": entries,
        }
        hb = json.dumps(header, sort_keys=True, default=list).encode()
        return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != CKPT_MAGIC:
            raise ValueError("not a maelab checkpoint")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + hlen])
        base = 16 + hlen
        out = {"param": {}, "optim": {}}
        for e in header["tensors"]:
            start = base + e["offset"]
            arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
            out[e["group"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        return cls(out["param"], out["optim"], header["step"], header["config"], header["format_version"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def encoder_tensors(self) -> dict[str, np.ndarray]:
        """Encoder weights with the ``encoder.`` prefix stripped; decoder keys dropped."""
        out = {}
        for k, v in self.tensors.items():
            if k.startswith("encoder."):
                out[k[len("encoder."):]] = v
            elif not k.startswith(("decoder", "mask_token")):
                out[k] = v
        return out


def load_encoder(vit: VisionTransformer, ckpt: Checkpoint, skip_head: bool = True) -> list[str]:
    """Copy encoder weights into ``vit``; returns names that stayed at initialization."""
    src = ckpt.encoder_tensors()
    bad = []
    for name, t in vit.params.items():
        if name in src and src[name].shape != t.shape:
            bad.append(f"{name}: checkpoint {tuple(src[name].shape)} vs model {t.shape}")
    if bad:
        raise ValueError("shape mismatch loading encoder:\n  " + "\n  ".join(bad))
    missing = []
    for name, t in vit.params.items():
        if skip_head and name.startswith("head."):
            continue
        if name in src:
            t.data = np.array(src[name], dtype=t.dtype)
        else:
            missing.append(name)
    return missing


# -- logging --------------------------------------------------------------------------------

class RunLog:
    """Per-epoch rows written to ``log.csv`` and a JSON summary in the run directory."""

    FIELDS = ["epoch", "step", "lr", "loss", "mAUC"]

    def __init__(self, out_dir=None):
        self.rows: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def add(self, **row) -> None:
        self.rows.append(row)
        if self.out_dir:
            with open(self.out_dir / "log.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=self.FIELDS, extrasaction="ignore", lineterminator="\n")
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: r.get(k, "") for k in self.FIELDS})

    def summary(self, **extra) -> dict:
        out = {"epochs": len(self.rows), "final": self.rows[-1] if self.rows else None, **extra}
        if self.out_dir:
            (self.out_dir / "summary.json").write_text(json.dumps(out, indent=2, default=_jsonable))
        return out


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and math.isnan(x):
        return None
    return str(x)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list[float]
    reports: list[EvalReport] = field(default_factory=list)
    initial_loss: float = math.nan
    lrs: list[float] = field(default_factory=list)

    @property
    def final_report(self) -> EvalReport | None:
        return self.reports[-1] if self.reports else None


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


# -- pre-training ---------------------------------------------------------------------------

def pretrain(cfg: TrainRunConfig, dataset: ArrayDataset | None = None, out_dir=None) -> StageResult:
    """MAE loop; loss per epoch is the mean masked-patch MSE."""
    if cfg.stage != "pretrain":
        raise ValueError("pretrain() needs a pretrain-stage config")
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if len(dataset) == 0:
        raise ValueError("pre-training dataset is empty")
    mae = MaskedAutoencoder(cfg.vit, cfg.decoder, seed=cfg.seed, normalize_targets=cfg.normalize_targets)
    params = mae.named_parameters()
    opt = make_optimizer(params, cfg.optim)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    sched = dataclasses.replace(cfg.schedule, steps_per_epoch=steps_per_epoch)
    base_lr = cfg.optim.scaled_lr(cfg.batch_size)
    rng = np.random.default_rng([cfg.seed, 1])
    runlog = RunLog(out_dir)
    transform = lambda img, r: pretrain_transform(img, cfg.augment, r)  # noqa: E731
    losses, lrs = [], []
    initial = math.nan
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for xs, _, _ in iterate_batches(dataset, cfg.batch_size, transform, cfg.seed, epoch, workers=cfg.workers):
            plan = make_mask_plan(cfg.vit.num_patches, cfg.mask_ratio, len(xs), rng)
            _, loss = mae.forward(xs, plan, training=True, rng=rng)
            if step == 0:
                initial = loss.item()
            loss.backward()
            lr = lr_at(step, sched, base_lr)
            opt.step(lr)
            opt.zero_grad()
            total += loss.item() * len(xs)
            count += len(xs)
            step += 1
        losses.append(total / count)
        lrs.append(lr)
        runlog.add(epoch=epoch, step=step, lr=lr, loss=losses[-1])
        if cfg.checkpoint_every and out_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            Checkpoint(_snapshot(params), opt.state_dict(), step, cfg.to_dict()).save(Path(out_dir) / f"ckpt_{epoch + 1:04d}.bin")
    ckpt = Checkpoint(_snapshot(params), opt.state_dict(), step, cfg.to_dict())
    if out_dir:
        ckpt.save(Path(out_dir) / "checkpoint.bin")
    runlog.summary(initial_loss=initial, final_loss=losses[-1] if losses else None, config_hash=ckpt.config_hash)
    return StageResult(ckpt, losses, initial_loss=initial, lrs=lrs)


def build_mae(ckpt: Checkpoint) -> MaskedAutoencoder:
    """Rebuild a MaskedAutoencoder from a pre-training checkpoint."""
    cfg = TrainRunConfig.from_dict(ckpt.config)
    mae = MaskedAutoencoder(cfg.vit, cfg.decoder, seed=cfg.seed, normalize_targets=cfg.normalize_targets)
    for name, t in mae.named_parameters().items():
        t.data = np.array(ckpt.tensors[name], dtype=t.dtype)
    return mae


def build_vit(ckpt: Checkpoint) -> VisionTransformer:
    """Classifier from a fine-tune / probe checkpoint (or an encoder from a pre-train one)."""
    cfg = TrainRunConfig.from_dict(ckpt.config)
    vit = VisionTransformer(cfg.vit, seed=cfg.seed)
    load_encoder(vit, ckpt, skip_head=False)
    return vit


# -- supervised stages ----------------------------------------------------------------------

def predict_scores(vit: VisionTransformer, dataset: ArrayDataset, aug: AugmentConfig, batch_size: int = 128) -> np.ndarray:
    """Sigmoid class probabilities for every sample (eval transform, no grad)."""
    outs = []
    with ad.no_grad():
        for i in range(0, len(dataset), batch_size):
            xs = np.stack([eval_transform(im, aug) for im in dataset.images[i:i + batch_size]])
            outs.append(1.0 / (1.0 + np.exp(-vit.forward(xs).data.astype(np.float64))))
    return np.concatenate(outs)


def evaluate(vit: VisionTransformer, dataset: ArrayDataset, aug: AugmentConfig) -> EvalReport:
    return EvalReport.from_scores(predict_scores(vit, dataset, aug), dataset.labels)


def _supervised(cfg, vit, train_set, eval_set, trainable, lr_scales, out_dir, frozen_features):
    opt = make_optimizer(trainable, cfg.optim, lr_scales)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    sched = dataclasses.replace(cfg.schedule, steps_per_epoch=steps_per_epoch)
    base_lr = cfg.optim.scaled_lr(cfg.batch_size)
    rng = np.random.default_rng([cfg.seed, 2])
    runlog = RunLog(out_dir)
    if cfg.stage == "finetune":
        transform = lambda img, r: finetune_transform(img, cfg.augment, r)  # noqa: E731
    else:
        transform = lambda img, r: pretrain_transform(img, cfg.augment, r)  # noqa: E731
    losses, reports, lrs = [], [], []
    initial = math.nan
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for xs, ys, _ in iterate_batches(train_set, cfg.batch_size, transform, cfg.seed, epoch, workers=cfg.workers):
            if frozen_features:
                with ad.no_grad():
                    feats = vit.forward_features(xs)
                logits = vit.head(Tensor(feats.data))
            else:
                logits = vit.forward(xs, training=True, rng=rng)
            loss = ad.bce_with_logits(logits, ys)
            if step == 0:
                initial = loss.item()
            loss.backward()
            lr = lr_at(step, sched, base_lr)
            opt.step(lr)
            opt.zero_grad()
            total += loss.item() * len(xs)
            count += len(xs)
            step += 1
        losses.append(total / count)
        lrs.append(lr)
        report = None
        if eval_set is not None and len(eval_set) and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            report = evaluate(vit, eval_set, cfg.augment)
            reports.append(report)
        runlog.add(epoch=epoch, step=step, lr=lr, loss=losses[-1], mAUC=report.mean_auc if report else "")
    ckpt = Checkpoint(_snapshot(vit.params), opt.state_dict(), step, cfg.to_dict())
    if out_dir:
        ckpt.save(Path(out_dir) / "checkpoint.bin")
        if reports:
            (Path(out_dir) / "eval.json").write_text(reports[-1].to_json())
            (Path(out_dir) / "eval.csv").write_text(reports[-1].to_csv(train_set.class_names or None))
    runlog.summary(initial_loss=initial, final_loss=losses[-1] if losses else None,
                   final_mAUC=reports[-1].mean_auc if reports else None, config_hash=ckpt.config_hash)
    return StageResult(ckpt, losses, reports, initial, lrs)


def _check_labels(cfg: TrainRunConfig, dataset: ArrayDataset) -> None:
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.labels.shape[1] != cfg.vit.num_classes:
        raise ValueError(f"dataset has {dataset.labels.shape[1]} classes, model head has {cfg.vit.num_classes}")


def finetune(cfg: TrainRunConfig, init: Checkpoint | None = None, train_set: ArrayDataset | None = None,
             eval_set: ArrayDataset | None = None, out_dir=None) -> StageResult:
    """Full fine-tuning with per-class BCE, layer-wise LR decay and DropPath."""
    if cfg.stage != "finetune":
        raise ValueError("finetune() needs a finetune-stage config")
    train_set = train_set if train_set is not None else load_dataset(cfg, "train")
    eval_set = eval_set if eval_set is not None else load_dataset(cfg, "eval")
    _check_labels(cfg, train_set)
    vit = VisionTransformer(cfg.vit, seed=cfg.seed)
    if init is not None:
        load_encoder(vit, init)
    plan = LayerDecayPlan.build(vit.params, cfg.vit.depth, cfg.layer_decay)
    mults = layer_decay_multipliers(cfg.vit.depth, cfg.layer_decay)
    lr_scales = {name: mults[g] for name, g in plan.groups.items()}
    return _supervised(cfg, vit, train_set, eval_set, vit.params, lr_scales, out_dir, frozen_features=False)


def linear_probe(cfg: TrainRunConfig, init: Checkpoint | None, train_set: ArrayDataset | None = None,
                 eval_set: ArrayDataset | None = None, out_dir=None) -> StageResult:
    """Train only the linear head on frozen encoder features (LARS by default)."""
    if cfg.stage != "linprobe":
        raise ValueError("linear_probe() needs a linprobe-stage config")
    train_set = train_set if train_set is not None else load_dataset(cfg, "train")
    eval_set = eval_set if eval_set is not None else load_dataset(cfg, "eval")
    _check_labels(cfg, train_set)
    vit = VisionTransformer(cfg.vit, seed=cfg.seed)
    if init is not None:
        load_encoder(vit, init)
    head = {k: v for k, v in vit.params.items() if k.startswith("head.")}
    return _supervised(cfg, vit, train_set, eval_set, head, None, out_dir, frozen_features=True)


def crop_scale_ablation(pretrain_cfg: TrainRunConfig, probe_cfg: TrainRunConfig,
                        scales=(None, (0.2, 1.0), (0.5, 1.0)), train_set=None, eval_set=None,
                        pretrain_set=None, csv_path=None) -> list[dict]:
    """Pre-train once per crop scale, linear-probe each, return (and optionally write) CSV rows."""
    rows = []
    for scale in scales:
        pcfg = dataclasses.replace(pretrain_cfg, augment=dataclasses.replace(pretrain_cfg.augment, crop_scale=scale))
        ckpt = pretrain(pcfg, pretrain_set).checkpoint
        rep = linear_probe(probe_cfg, ckpt, train_set, eval_set).final_report
        rows.append({"rrc": scale is not None, "crop_scale": "N/A" if scale is None else f"({scale[0]}, {scale[1]})",
                     "mAUC": rep.mean_auc if rep else math.nan})
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["rrc", "crop_scale", "mAUC"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
