"""``maelab`` command line: one subcommand per stage plus report and figure emission.

Configuration is resolved in order: stage defaults (``--preset``), then the
``--config`` TOML file (flat dotted keys or nested tables), then each
``--set key=value``, then ``--seed`` / ``--workers``.
"""
from __future__ import annotations

import os

_threads = os.environ.get("MAE_LAB_THREADS")
if _threads:
    # must precede the first numpy import to reach the BLAS pools
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .data import (  # noqa: E402
    DatasetManifest,
    Sample,
    SyntheticSpec,
    eval_transform,
    generate_synthetic,
    inject_anomaly,
    resize_bilinear,
    save_png16,
    to_three_channels,
    normalize,
    write_manifest,
)
from .engine import (  # noqa: E402
    Checkpoint,
    TrainRunConfig,
    build_mae,
    build_vit,
    desk_config,
    evaluate,
    finetune,
    flatten,
    linear_probe,
    load_dataset,
    paper_config,
    pretrain,
)
from .explain import (  # noqa: E402
    Heatmap,
    anomaly_map,
    ap_table,
    grad_cam,
    localization_ious,
    save_heatmap_png,
    write_grid,
)
from .mae import make_mask_plan, masked_psnr  # noqa: E402
from .plots import save_image_grid, save_line_chart, to_uint8  # noqa: E402
from .vit import patchify, unpatchify  # noqa: E402

COMMANDS = ("pretrain", "finetune", "linprobe", "eval", "localize", "anomaly", "synth", "reconstruct")


class CliError(Exception):
    pass


def _cap_threads() -> None:
    if not _threads:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(int(_threads))


def version_string() -> str:
    """Package version, suffixed with ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- config resolution ----------------------------------------------------------------------

def read_config_file(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return flatten(tomllib.load(fh))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"cannot parse config {path}: {exc}") from exc


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise CliError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value
    return out


def resolve_config(stage: str, args, base: TrainRunConfig | None = None) -> TrainRunConfig:
    cfg = base or (paper_config(stage) if args.preset == "paper" else desk_config(stage))
    layers = []
    if args.config:
        layers.append(read_config_file(args.config))
    layers.append(parse_overrides(args.set))
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.workers is not None:
        extra["workers"] = args.workers
    layers.append(extra)
    for layer in layers:
        layer = {k: v for k, v in layer.items() if k != "stage"}
        if layer:
            try:
                cfg = cfg.override(layer)
            except KeyError as exc:
                raise CliError(str(exc.args[0])) from exc
    return cfg


def prepare_out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    (out / "VERSION").write_text(version_string() + "\n")
    return out


def write_config(out: Path, cfg: TrainRunConfig | dict) -> None:
    d = cfg.to_dict() if isinstance(cfg, TrainRunConfig) else cfg
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=list) + "\n")


def _load_checkpoint(path) -> Checkpoint:
    if not path:
        raise CliError("--checkpoint is required")
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _model_input(image: np.ndarray, size: int, aug) -> np.ndarray:
    x = resize_bilinear(to_three_channels(image), size, size)
    return normalize(x, aug.mean, aug.std)


# -- training stages -----------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = resolve_config("pretrain", args)
    out = prepare_out(args, "runs/pretrain")
    write_config(out, cfg)
    res = pretrain(cfg, out_dir=out)
    save_line_chart(out / "loss.png", {"masked MSE": res.losses}, title="pre-training loss")
    print(f"pretrain: {len(res.losses)} epochs, loss {res.initial_loss:.4f} -> {res.losses[-1]:.4f}; "
          f"checkpoint {out / 'checkpoint.bin'}")
    return 0


def _supervised_cmd(stage: str, args) -> int:
    cfg = resolve_config(stage, args)
    out = prepare_out(args, f"runs/{stage}")
    write_config(out, cfg)
    init = _load_checkpoint(args.init) if args.init else None
    if stage == "finetune":
        res = finetune(cfg, init, out_dir=out)
    else:
        if init is None:
            print("linprobe: no --init given, probing a randomly initialized encoder", file=sys.stderr)
        res = linear_probe(cfg, init, out_dir=out)
    save_line_chart(out / "curves.png", {"loss": res.losses, "mAUC": [r.mean_auc for r in res.reports]},
                    title=f"{stage} curves")
    if res.final_report is not None:
        print(res.final_report.summary())
    return 0


def cmd_finetune(args) -> int:
    return _supervised_cmd("finetune", args)


def cmd_linprobe(args) -> int:
    return _supervised_cmd("linprobe", args)


def _checkpoint_config(ckpt: Checkpoint, args) -> TrainRunConfig:
    base = TrainRunConfig.from_dict(ckpt.config)
    return resolve_config(base.stage, args, base)


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    out = prepare_out(args, "runs/eval")
    write_config(out, cfg)
    vit = build_vit(ckpt)
    dataset = load_dataset(cfg, args.split)
    report = evaluate(vit, dataset, cfg.augment)
    (out / "eval.json").write_text(report.to_json())
    (out / "eval.csv").write_text(report.to_csv(dataset.class_names or None))
    print(report.summary())
    return 0


# -- explanation ---------------------------------------------------------------------------

def _box_heatmap(shape, box) -> Heatmap:
    h = np.zeros(shape)
    h[box.y:box.y + box.h, box.x:box.x + box.w] = 1.0
    return Heatmap(h, "stub")


def format_ap_table(rows) -> str:
    lines = [f"{'Class':<16}{'# cases':>9}{'AP25':>9}{'AP50':>9}"]
    for name, n, ap25, ap50 in rows:
        lines.append(f"{name:<16}{n:>9d}{ap25:>9.1f}{ap50:>9.1f}")
    return "\n".join(lines)


def cmd_localize(args) -> int:
    if args.stub_gt:
        cfg = resolve_config("finetune", args)
        vit = None
    else:
        ckpt = _load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(ckpt, args)
        vit = build_vit(ckpt)
    out = prepare_out(args, "runs/localize")
    write_config(out, cfg)
    dataset = load_dataset(cfg, args.split)
    if not dataset.boxes or not any(dataset.boxes):
        raise CliError("dataset has no box annotations")
    names = dataset.class_names or [f"class_{i}" for i in range(dataset.labels.shape[1])]
    ious: dict[str, list[float]] = {n: [] for n in names}
    per_case = []
    for i, boxes in enumerate(dataset.boxes):
        image = dataset.images[i]
        for c, box in boxes:
            if vit is None:
                hm = _box_heatmap(image.shape[-2:], box)
            else:
                cam = grad_cam(vit, eval_transform(image, cfg.augment), c)
                hm = Heatmap(resize_bilinear(cam.values[None], *image.shape[-2:])[0], "gradcam")
            value = localization_ious([hm], [box], args.threshold)[0]
            ious[names[c]].append(value)
            per_case.append([i, names[c], box.x, box.y, box.w, box.h, value])
            if args.save_heatmaps and len(per_case) <= args.save_heatmaps:
                save_heatmap_png(out / f"heatmap_{i:05d}_{c}.png", hm.values)
    rows = ap_table({k: v for k, v in ious.items() if v})
    table = format_ap_table(rows)
    print(table)
    (out / "ap_table.txt").write_text(table + "\n")
    with open(out / "ap_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "n_cases", "AP25", "AP50"])
        w.writerows(rows)
    with open(out / "ious.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "class", "x", "y", "w", "h", "iou"])
        w.writerows(per_case)
    return 0


def cmd_anomaly(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    if cfg.stage != "pretrain":
        raise CliError("anomaly maps need a pre-training (MAE) checkpoint")
    out = prepare_out(args, "runs/anomaly")
    write_config(out, cfg)
    mae = build_mae(ckpt)
    size = cfg.vit.image_size
    spec = SyntheticSpec.with_classes(cfg.data.n_classes, seed=cfg.data.synth_seed,
                                      image_size=cfg.data.image_size).lesion_free()
    rng = np.random.default_rng([cfg.seed, 5])
    rows = []
    for i in range(args.n):
        clean, _, _ = generate_synthetic(spec, 2_000_000 + i)
        image, box = inject_anomaly(clean, rng)
        amap = anomaly_map(mae, _model_input(image, size, cfg.augment), args.strategy, k=args.k,
                           mask_ratio=cfg.mask_ratio, rng=np.random.default_rng([cfg.seed, 6, i]))
        values = resize_bilinear(amap.values[None], *image.shape[-2:])[0]
        inside = np.zeros(values.shape, bool)
        inside[box.y:box.y + box.h, box.x:box.x + box.w] = True
        rows.append([i, box.x, box.y, box.w, box.h, float(values[inside].mean()), float(values[~inside].mean())])
        write_grid(out / f"anomaly_{i:03d}.hmap", values)
        save_image_grid(out / f"anomaly_{i:03d}.png", [[to_uint8(image, 0, 1), to_uint8(values)]])
    with open(out / "anomaly.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "x", "y", "w", "h", "mean_inside", "mean_outside"])
        w.writerows(rows)
    ins = np.mean([r[5] for r in rows])
    outs = np.mean([r[6] for r in rows])
    print(f"anomaly ({args.strategy}): mean inside {ins:.4f}, outside {outs:.4f}, ratio {ins / outs:.2f} "
          f"over {len(rows)} images")
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    if cfg.stage != "pretrain":
        raise CliError("reconstruct needs a pre-training (MAE) checkpoint")
    try:
        ratios = [int(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError as exc:
        raise CliError(f"--ratios expects comma-separated percentages, got {args.ratios!r}") from exc
    out = prepare_out(args, "runs/reconstruct")
    write_config(out, cfg)
    mae = build_mae(ckpt)
    p, size = cfg.vit.patch_size, cfg.vit.image_size
    dataset = load_dataset(cfg, "eval")
    images = dataset.images[:args.n]
    x = np.stack([_model_input(im, size, cfg.augment) for im in images]).astype(mae.dtype)
    mean = np.asarray(cfg.augment.mean).reshape(-1, 1, 1)
    std = np.asarray(cfg.augment.std).reshape(-1, 1, 1)
    back = lambda a: a * std + mean  # noqa: E731
    rows_csv = []
    for r in ratios:
        plan = make_mask_plan(cfg.vit.num_patches, r / 100.0, len(x), np.random.default_rng([cfg.seed, r]))
        recon = mae.reconstruct(x, plan)
        patches = patchify(x, p).copy()
        patches[np.arange(len(x))[:, None], plan.mask_indices] = np.nan
        masked = unpatchify(patches, p, (size // p, size // p), x.shape[1])
        grid = []
        for j in range(len(x)):
            vis = np.where(np.isnan(masked[j]), 0.0, back(masked[j]))
            grid.append([to_uint8(back(x[j]), 0, 1), to_uint8(vis, 0, 1), to_uint8(back(recon[j]), 0, 1)])
        save_image_grid(out / f"recon_{r}.png", grid)
        psnr = masked_psnr(back(recon), back(x), plan, p, 1.0)
        rows_csv.append([r, psnr])
        print(f"ratio {r}%: masked-patch PSNR {psnr:.2f} dB -> {out / f'recon_{r}.png'}")
    with open(out / "reconstruct.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask_ratio_pct", "masked_psnr_db"])
        w.writerows(rows_csv)
    return 0


# -- data -------------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    spec = SyntheticSpec.with_classes(args.classes, seed=seed, image_size=args.size)
    if args.lesion_free:
        spec = spec.lesion_free()
    out = prepare_out(args, "data/synth")
    (out / "images").mkdir(exist_ok=True)
    entries = []
    for i in range(args.n):
        img, labels, boxes = generate_synthetic(spec, i)
        ref = f"images/{i:05d}.png"
        save_png16(out / ref, img)
        entries.append(Sample(ref, labels.astype(np.int64), boxes))
    manifest = DatasetManifest(entries, [f"class_{i}" for i in range(args.classes)])
    write_manifest(manifest, out / "manifest.csv", out / "boxes.json")
    write_config(out, {"synth": {"n": args.n, "classes": args.classes, "seed": seed, "image_size": args.size,
                                 "lesion_free": bool(args.lesion_free)}})
    print(f"synth: {args.n} images, {args.classes} classes -> {out / 'manifest.csv'}")
    return 0


# -- entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with dotted keys, e.g. optim.base_lr = 1e-3")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="data-loading threads")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk", help="stage defaults to start from")

    parser = argparse.ArgumentParser(prog="maelab", description="Masked-autoencoder pre-training for radiographs.")
    parser.add_argument("--version", action="version", version=f"maelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("pretrain", parents=[common], help="MAE pre-training")
    for name in ("finetune", "linprobe"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} from a pre-training checkpoint")
        sp.add_argument("--init", help="pre-training checkpoint (omit for random init)")

    sp = sub.add_parser("eval", parents=[common], help="evaluate a classifier checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=("train", "eval"), default="eval")

    sp = sub.add_parser("localize", parents=[common], help="Grad-CAM boxes and the AP table")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=("train", "eval"), default="eval")
    sp.add_argument("--threshold", type=float, default=0.5, help="relative heatmap threshold")
    sp.add_argument("--stub-gt", action="store_true", help="use ground-truth boxes as heatmaps (pipeline check)")
    sp.add_argument("--save-heatmaps", type=int, default=0, metavar="N", help="write the first N heatmaps as PNG")

    sp = sub.add_parser("anomaly", parents=[common], help="reconstruction-difference maps on injected anomalies")
    sp.add_argument("--checkpoint")
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--strategy", choices=("ensemble", "single"), default="ensemble")
    sp.add_argument("--k", type=int, default=10, help="mask plans for the ensemble strategy")

    sp = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifest")
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--lesion-free", action="store_true")

    sp = sub.add_parser("reconstruct", parents=[common], help="original / masked / reconstruction grids")
    sp.add_argument("--checkpoint")
    sp.add_argument("--ratios", default="75,80,85,90", help="masking ratios in percent")
    sp.add_argument("--n", type=int, default=4, help="images per grid")
    return parser


HANDLERS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "linprobe": cmd_linprobe, "eval": cmd_eval,
    "localize": cmd_localize, "anomaly": cmd_anomaly, "synth": cmd_synth, "reconstruct": cmd_reconstruct,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already wrote to stderr
        return int(exc.code or 0)
    _cap_threads()
    try:
        return HANDLERS[args.command](args)
    except (CliError, ValueError, KeyError, IndexError, FloatingPointError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"maelab {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
