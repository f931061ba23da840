"""``ucl-dehaze`` command line: train, infer, eval and ablate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (IMAGE_EXTENSIONS, from_network_range, image_to_tensor, load_image, save_image,
                   scan_unpaired, tensor_to_image, to_network_range)
from .errors import UCLDehazeError
from .metrics import METRIC_NAMES, evaluate_dirs, psnr, ssim, write_report
from .trainer import VARIANTS, TrainConfig, fit, load_generator, read_config_file, variant_flags

logger = logging.getLogger("ucl_dehaze")

DEVICE_ENV = "UCL_DEHAZE_DEVICE"
FLAG_LABELS = (("use_ide", "L_ide"), ("use_dual_pc", "Dual-L_PC"), ("use_scp", "L_SCP"),
               ("use_sp_norm", "Sp-Norm"), ("use_sc_conv", "SC Conv"))


# --------------------------------------------------------------------------
# run manifest


def _now():
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """``manifest.json`` written before any other output and updated on exit."""

    def __init__(self, out_dir, command, config=None, paths=None, seed=None):
        self.path = Path(out_dir) / "manifest.json"
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "paths": {k: (str(v) if v is not None else None) for k, v in (paths or {}).items()},
            "seed": seed,
            "code_version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "started": _now(),
            "finished": None,
            "wall_clock_s": None,
            "status": "running",
            "failed_items": [],
        }
        self._t0 = time.monotonic()
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, default=str))
        os.replace(tmp, self.path)

    def finish(self, status="ok", failed=()):
        self.data.update(status=status, failed_items=list(failed), finished=_now(),
                         wall_clock_s=round(time.monotonic() - self._t0, 3))
        self.write()


# --------------------------------------------------------------------------
# helpers


def _resolve_config(args) -> TrainConfig:
    """Precedence: command-line flags, then the config file, then defaults."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {"seed": args.seed, "crop_size": args.crop_size, "epochs": args.epochs,
                 "device": args.device, "scp_negative": args.scp_negative}
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    raw.setdefault("device", os.environ.get(DEVICE_ENV, "cpu"))
    if args.epochs is not None:
        if "decay_start" not in raw:
            raw["decay_start"] = max(1, args.epochs // 2)
        raw["decay_start"] = min(raw["decay_start"], args.epochs)
    if getattr(args, "variant", None):
        raw["variant"] = dataclasses.asdict(variant_flags(args.variant))
    return TrainConfig.from_dict(raw)


def _images(directory):
    directory = Path(directory)
    return [p for p in sorted(directory.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]


def dehaze_image(G, img: np.ndarray) -> np.ndarray:
    """Restore one ``H x W x 3`` [0, 1] image with an eval-mode generator."""
    with torch.no_grad():
        out = G(image_to_tensor(to_network_range(img)))
    return np.clip(from_network_range(tensor_to_image(out)), 0.0, 1.0)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    config = _resolve_config(args)
    manifest = RunManifest(out_dir, "train", config.to_dict(),
                           {"config": args.config, "hazy_dir": args.hazy_dir,
                            "clean_dir": args.clean_dir, "out_dir": out_dir}, config.seed)
    try:
        data = scan_unpaired(args.hazy_dir, args.clean_dir, config.crop_size)
        fit(config, data, out_dir, resume_from=args.resume)
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish()
    print(f"training finished: {out_dir / 'final.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    out_dir = Path(args.out_dir)
    manifest = RunManifest(out_dir, "infer", None, {"checkpoint": args.checkpoint,
                                                    "input_dir": args.input_dir, "out_dir": out_dir})
    try:
        G = load_generator(args.checkpoint)
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.data["config"] = dataclasses.asdict(G.config)
    failed = []
    inputs = _images(args.input_dir)
    for path in inputs:
        try:
            save_image(out_dir / (path.stem + ".png"), dehaze_image(G, load_image(path)))
        except UCLDehazeError as exc:
            logger.error("%s: %s", path.name, exc)
            failed.append(path.name)
    manifest.finish("ok" if not failed else "partial", failed)
    print(f"restored {len(inputs) - len(failed)}/{len(inputs)} images into {out_dir}")
    for name in failed:
        print(f"failed: {name}", file=sys.stderr)
    return 0 if not failed else 1


def _report_paths(report):
    report = Path(report)
    base = report.with_suffix("") if report.suffix.lower() in (".csv", ".json") else report
    return base.with_suffix(".csv"), base.with_suffix(".json")


def cmd_eval(args) -> int:
    csv_path, json_path = _report_paths(args.report)
    manifest = RunManifest(csv_path.parent, "eval", None,
                           {"restored_dir": args.restored_dir, "reference_dir": args.reference_dir,
                            "hazy_dir": args.hazy_dir, "report": args.report})
    report = evaluate_dirs(args.restored_dir, args.reference_dir, args.hazy_dir, workers=args.workers,
                           contrast_radius=args.contrast_radius, edge_threshold=args.edge_threshold)
    write_report(report, csv_path, json_path)
    failed = [r["name"] for r in report.rows if r["status"] != "ok"]
    manifest.finish("ok" if not failed else "partial", failed)
    print(f"evaluated {len(report.rows) - len(failed)}/{len(report.rows)} images")
    for name in METRIC_NAMES:
        value = report.means.get(name)
        if value is not None:
            print(f"  {name:>14s}: {value:.4f}")
    for r in report.rows:
        if r["status"] != "ok":
            print(f"{r['name']}: {r['status']}", file=sys.stderr)
    return 0 if not failed else 1


def _paired_eval(G, hazy_dir, clean_dir):
    clean = {p.stem: p for p in _images(clean_dir)}
    psnrs, ssims = [], []
    for p in _images(hazy_dir):
        if p.stem in clean:
            restored = dehaze_image(G, load_image(p))
            ref = load_image(clean[p.stem])
            psnrs.append(psnr(restored, ref))
            ssims.append(ssim(restored, ref))
    if not psnrs:
        return None, None
    return float(np.mean(psnrs)), float(np.mean(ssims))


def write_ablation_table(rows, out_dir):
    """Persist the ablation rows as CSV and a markdown table (atomic rewrite)."""
    out_dir = Path(out_dir)
    cols = ["variant", *[label for _, label in FLAG_LABELS], "psnr", "ssim", "final_total"]
    tmp = out_dir / "ablation.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") if r.get(c) is not None else "" for c in cols])
    os.replace(tmp, out_dir / "ablation.csv")
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append("" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    tmp = out_dir / "ablation.md.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out_dir / "ablation.md")


def cmd_ablate(args) -> int:
    out_dir = Path(args.out_dir)
    base = _resolve_config(args)
    names = args.variants or list(VARIANTS)
    manifest = RunManifest(out_dir, "ablate", base.to_dict(),
                           {"config": args.config, "hazy_dir": args.hazy_dir, "clean_dir": args.clean_dir,
                            "out_dir": out_dir, "test_hazy": args.test_hazy, "test_clean": args.test_clean},
                           base.seed)
    data = scan_unpaired(args.hazy_dir, args.clean_dir, base.crop_size)
    rows, failed = [], []
    for name in names:
        raw = base.to_dict()
        raw["variant"] = dataclasses.asdict(variant_flags(name))
        config = TrainConfig.from_dict(raw)
        try:
            final = fit(config, data, out_dir / name)
        except UCLDehazeError as exc:
            logger.error("variant %s failed: %s", name, exc)
            failed.append(name)
            continue
        row = {"variant": name.upper() if name != "base" else "Base"}
        for attr, label in FLAG_LABELS:
            row[label] = "✓" if getattr(config.variant, attr) else "w/o"
        if args.test_hazy and args.test_clean:
            row["psnr"], row["ssim"] = _paired_eval(load_generator(final), args.test_hazy, args.test_clean)
        with open(out_dir / name / "losses.csv", newline="") as fh:
            last = list(csv.DictReader(fh))[-1]
        row["final_total"] = float(last["total"])
        rows.append(row)
        write_ablation_table(rows, out_dir)
    manifest.finish("ok" if not failed else "partial", failed)
    print((out_dir / "ablation.md").read_text() if rows else "no variant completed")
    return 0 if not failed else 1


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config", help="JSON or TOML file with TrainConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--device", help=f"torch device (default: ${DEVICE_ENV} or cpu)")
    p.add_argument("--scp-negative", choices=("self", "random"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucl-dehaze", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on unpaired hazy/clean directories")
    p.add_argument("hazy_dir")
    p.add_argument("clean_dir")
    p.add_argument("out_dir")
    _add_train_flags(p)
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dehaze every image in a directory")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compute the metric report")
    p.add_argument("restored_dir")
    p.add_argument("--reference-dir")
    p.add_argument("--hazy-dir")
    p.add_argument("--report", required=True, help="output path; .csv and .json are written")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--contrast-radius", type=int, default=3)
    p.add_argument("--edge-threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train Base and V1..V5 and tabulate them")
    p.add_argument("hazy_dir")
    p.add_argument("clean_dir")
    p.add_argument("out_dir")
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), help="subset to run (default: all six)")
    p.add_argument("--test-hazy", help="held-out hazy images, paired by file stem with --test-clean")
    p.add_argument("--test-clean")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UCLDehazeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
