"""Command-line harness.

Subcommands:

    generate-data   write a synthetic phantom dataset plus split.json
    train           train one variant from a JSON run config
    evaluate        score a checkpoint on the test split, write CSV
    predict         segment one image file with a checkpoint
    gradcheck       run the registered finite-difference suite
    augment-preview write before/after augmentation pairs plus records CSV
    ablate          train and score all six variants with a shared seed

Exit codes: 0 success, 1 validation or config error, 2 numeric failure
(non-finite loss, failed gradient check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugConfig, augment_batch, write_records_csv
from .config import (VARIANT_EFFECTS, VARIANTS, RunConfig, load_run_config,
                     save_resolved)
from .data_io import (generate_phantoms, load_checkpoint, load_split,
                      read_array, save_dataset, split_dataset, write_array)
from .errors import (CompatibilityError, ConfigError, ContractError,
                     FormatError, NumericError, ShapeError, ValidationError)
from .gradcheck import run_suite
from .metrics import write_report_csv
from .network import NetworkConfig, ModelState, build_model, predict_labels
from .train import evaluate_scans, train

PREVIEW_SLICES = 8


def _load_model(cfg: RunConfig, checkpoint) -> ModelState:
    m = build_model(cfg.model, seed=cfg.seed)
    params = load_checkpoint(checkpoint, expected_names=m.parameter_names())
    for name, arr in params.items():
        if arr.shape != m.params[name].dims:
            raise CompatibilityError(
                f"checkpoint entry {name} has shape {arr.shape}, model "
                f"expects {m.params[name].dims}")
        m.params[name].data = arr.astype(np.float32)
    return m


def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(
            f"output directory {out} is not empty; pass --force to overwrite")
    scans = generate_phantoms(args.seed, n_scans=args.scans)
    split = split_dataset(scans, args.seed)
    save_dataset(out, scans, split)
    print(f"wrote {len(scans)} scans to {out} "
          f"(train {len(split.train_ids)}, test {len(split.test_ids)})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = train(cfg)
    print(f"trained variant={cfg.variant} for {len(result.losses)} iterations; "
          f"final loss {result.losses[-1]:.6f}")
    print(f"log: {result.log_path}")
    print(f"best checkpoint: {result.best_path} (epoch {result.best_epoch})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    m = _load_model(cfg, args.checkpoint)
    split = load_split(cfg.data_dir)
    combined, per_scan = evaluate_scans(m, cfg.data_dir, split.test_ids,
                                        cfg.model.num_classes, cfg.batch_size)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "evaluation.csv"
    write_report_csv(combined, path)
    for sid, report in per_scan:
        print(f"scan {sid}: dice {report.mean_dice:.4f} "
              f"hd95 {report.mean_hd95:.4f}")
    print(f"mean dice {combined.mean_dice:.4f} "
          f"mean hd95 {combined.mean_hd95:.4f} -> {path}")
    return 0


def _infer_config(params: dict[str, np.ndarray], input_size: int) -> NetworkConfig:
    """Rebuild network dimensions from checkpoint shapes.

    Pyramid scale list and head count leave no trace in parameter shapes, so
    the defaults are assumed; pass --config when a run changed them.
    """
    try:
        stage1 = params["enc.stage1.conv1.w"]
        head = params["head.conv2.w"]
        fc1 = params["tr1.mlp.fc1.w"]
    except KeyError as exc:
        raise CompatibilityError(
            f"checkpoint lacks required entry {exc.args[0]}") from exc
    base, in_channels = int(stage1.shape[0]), int(stage1.shape[1])
    if "att.bottleneck.refine.w" in params:
        attention = "joint"
    elif "att.bottleneck.cam.wq" in params:
        attention = "cam"
    elif "att.bottleneck.pam.wq" in params:
        attention = "pam"
    else:
        attention = "none"
    layers = len({name.split(".")[0] for name in params
                  if name.startswith("tr")})
    return NetworkConfig(
        in_channels=in_channels, num_classes=int(head.shape[0]),
        base_channels=base, input_size=input_size, embed_dim=4 * base,
        mlp_ratio=int(fc1.shape[1]) // int(fc1.shape[0]), layers=layers,
        attention=attention)


def cmd_predict(args) -> int:
    image = read_array(args.input).astype(np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[-2] != image.shape[-1]:
        raise ValidationError(
            f"input must be one square slice (C x H x W), got {image.shape}")
    if args.config is not None:
        cfg = load_run_config(args.config)
        m = _load_model(cfg, args.checkpoint)
    else:
        params = load_checkpoint(args.checkpoint)
        net = _infer_config(params, input_size=image.shape[-1])
        m = build_model(net, seed=0)
        expected = sorted(m.params)
        got = sorted(params)
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise CompatibilityError(
                f"checkpoint does not match the inferred model: missing "
                f"{missing}, extra {extra}; pass --config")
        for name, arr in params.items():
            if arr.shape != m.params[name].dims:
                raise CompatibilityError(
                    f"checkpoint entry {name} has shape {arr.shape}, model "
                    f"expects {m.params[name].dims}")
            m.params[name].data = arr
    mask = predict_labels(m, image[None])[0]
    write_array(args.out, mask.astype(np.uint8))
    print(f"wrote {args.out} (classes present: {sorted(np.unique(mask).tolist())})")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(verbose=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


def cmd_augment_preview(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scans = generate_phantoms(args.seed, n_scans=1,
                              slices_per_scan=PREVIEW_SLICES)
    images = np.stack([sl.image for sl in scans[0].slices])
    labels = np.stack([sl.label for sl in scans[0].slices])
    rng = np.random.default_rng(args.seed)
    after_images, after_labels, records = augment_batch(
        images.copy(), labels.copy(), AugConfig(rng_seed=args.seed), rng)
    for i in range(images.shape[0]):
        write_array(out / f"before_{i}.img.jcpt", images[i])
        write_array(out / f"before_{i}.lbl.jcpt", labels[i].astype(np.uint8))
        write_array(out / f"after_{i}.img.jcpt", after_images[i])
        write_array(out / f"after_{i}.lbl.jcpt", after_labels[i].astype(np.uint8))
    write_records_csv(records, out / "records.csv")
    print(f"wrote {images.shape[0]} before/after pairs and "
          f"{len(records)} records to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg.data_dir)
    rows = []
    for variant in VARIANTS:
        kind = VARIANT_EFFECTS[variant][0]
        sub = replace(cfg, variant=variant,
                      out_dir=str(out_dir / f"variant_{variant}"),
                      model=replace(cfg.model, attention=kind))
        result = train(sub)
        m = _load_model(sub, result.best_path)
        combined, _ = evaluate_scans(m, sub.data_dir, split.test_ids,
                                     sub.model.num_classes, sub.batch_size)
        rows.append((variant, combined.mean_dice, combined.mean_hd95))
        print(f"{variant}: dice {combined.mean_dice:.4f} "
              f"hd95 {combined.mean_hd95:.4f}")
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "mean_dice", "mean_hd95"])
        for variant, d, h in rows:
            writer.writerow([variant, f"{d:.6f}", f"{h:.6f}"])
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jcapa",
        description="Attention-refined segmentation engine on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a phantom dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scans", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one slice")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None,
                   help="run config; otherwise dimensions are inferred "
                        "from the checkpoint")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("augment-preview", help="write augmentation samples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment_preview)

    p = sub.add_parser("ablate", help="train and score all six variants")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError, ShapeError, CompatibilityError,
            ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
