"""Command-line entry point: ``train``, ``denoise``, ``eval`` and ``ablate``.

Exit codes: 0 success, 1 runtime failure (e.g. every input unreadable),
2 invalid configuration or arguments, 3 numerical abort during training.
Tables go to stdout tab-delimited; figures and CSVs land under ``<out>/report``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .checkpoint import read_checkpoint
from .config import PRESETS, RunConfig, default_data_root, load_config, DATA_ROOT_ENV
from .errors import ConfigError, DenoiseError, FormatError, NumericalError, ShapeError
from .imagepipe import ImageSample
from .metrics import EvalResult, capped, emit_report, write_summary_csv
from .model import MODE_COLORSPACE, DenoiserModel, full_inference, to_packed
from .trainer import TrainData, train, validate, validation_inputs

log = logging.getLogger("denoise_transformer")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
VARIANTS = (("baseline", False, False), ("+SNE", False, True),
            ("+CADT", True, False), ("+CADT+SNE", True, True))
DELIM = "\t"


def _emit(*cols) -> None:
    print(DELIM.join(str(c) for c in cols), flush=True)


def _fmt(x: float, digits: int = 4) -> str:
    return "inf" if math.isinf(x) else f"{x:.{digits}f}"


# data

def load_train_data(cfg: RunConfig) -> TrainData:
    d = cfg.data
    if d.toy_images is not None:
        imgs = dio.toy_images(d.toy_images, d.toy_size, seed=0)
        n_train = d.toy_images - d.toy_val
        train_set = [ImageSample(x, "grey", None, f"toy{i:03d}") for i, x in enumerate(imgs[:n_train])]
        val_set = [ImageSample(x, "grey", x, f"toy{i + n_train:03d}") for i, x in enumerate(imgs[n_train:])]
        return TrainData(train_set, val_set)
    root = default_data_root()
    train_dir = d.train_dir or (str(root / "train") if root else None)
    val_dir = d.val_dir or (str(root / "val") if root and (root / "val").is_dir() else None)
    if train_dir is None:
        raise ConfigError(f"data.train_dir: not set (and ${DATA_ROOT_ENV} is unset)")
    cs = MODE_COLORSPACE[cfg.mode]
    train_set = dio.load_dataset(train_dir, cs)
    val_set = []
    if val_dir is not None:
        val_set = dio.load_dataset(val_dir, cs)
        if cfg.train.noise is None and any(s.clean is None for s in val_set):
            raise ConfigError(f"data.val_dir: real-noise validation needs clean references in {val_dir}/manifest.json")
    return TrainData(train_set, val_set)


def _out_dir(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out or cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed,
                                  train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


# train

def cmd_train(args) -> int:
    try:
        cfg = _resolve_config(args)
        data = load_train_data(cfg)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args, cfg, "run")
    (out / "config.json").write_text(dataclasses.replace(cfg, out=str(out)).dumps())
    model = DenoiserModel.build(cfg.model, cfg.seed)
    _emit("epoch", "loss", "lr", "val_psnr", "val_ssim")

    def on_epoch(r):
        _emit(r["epoch"], f"{r['loss']:.6f}", f"{r['lr']:.3g}",
              "-" if r["val_psnr"] is None else _fmt(r["val_psnr"]),
              "-" if r["val_ssim"] is None else _fmt(r["val_ssim"]))

    try:
        result = train(model, data, cfg.train, out_dir=out, resume=args.resume,
                       max_steps=args.max_steps, on_epoch=on_epoch)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    best = result.best_path or result.last_path
    report = EvalResult()
    if data.val and best is not None:
        report = validate(read_checkpoint(best).model, validation_inputs(data, cfg.train))
    emit_report(report, result.curve, out / "report")
    _emit("checkpoint", best)
    if len(report):
        _emit("mean_psnr", _fmt(report.mean_psnr), "mean_ssim", _fmt(report.mean_ssim))
    return EXIT_OK


# denoise

def denoise_image(noisy: np.ndarray, model: DenoiserModel) -> np.ndarray:
    """Reflect-pad to the packing/masking cell, run inference, crop back."""
    cfg = model.config
    cell = cfg.pd_factor * cfg.mask_stride * (2 if cfg.mode == "raw-bayer" else 1)
    h, w = noisy.shape[:2]
    ph, pw = -h % cell, -w % cell
    if ph or pw:
        noisy = np.pad(noisy, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    return full_inference(noisy, model)[:h, :w]


def cmd_denoise(args) -> int:
    try:
        model = read_checkpoint(args.checkpoint).model
    except (OSError, FormatError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        print(f"error: input directory {in_dir} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    files = dio.list_images(in_dir)
    if not files:
        print(f"error: no images in {in_dir}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or "denoised")
    out.mkdir(parents=True, exist_ok=True)
    want = model.config.input_channels
    done = 0
    for path in files:
        try:
            pixels, depth = dio.read_image(path)
        except FormatError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if pixels.shape[-1] != want:
            print(f"error: {path.name} has {pixels.shape[-1]} channel(s); checkpoint mode "
                  f"{model.config.mode!r} expects {want}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            den = denoise_image(pixels, model)
        except ShapeError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        dio.write_image(out / path.name, den, depth)
        _emit(path.name, "ok")
        done += 1
    if done == 0:
        print("error: no input could be denoised", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# eval

def cmd_eval(args) -> int:
    den_dir, clean_dir = Path(args.denoised), Path(args.clean)
    for d in (den_dir, clean_dir):
        if not d.is_dir():
            print(f"error: {d} is not a directory", file=sys.stderr)
            return EXIT_CONFIG
    den = {p.name: p for p in dio.list_images(den_dir)}
    clean = {p.name: p for p in dio.list_images(clean_dir)}
    if not den or not clean:
        print("error: nothing to evaluate (empty directory)", file=sys.stderr)
        return EXIT_CONFIG
    unpaired = sorted(set(den) ^ set(clean))
    if unpaired:
        for name in unpaired:
            side = "denoised" if name in den else "clean"
            print(f"unpaired: {name} (only in {side})", file=sys.stderr)
        return EXIT_CONFIG
    result = EvalResult()
    for name in sorted(den):
        try:
            a, _ = dio.read_image(den[name])
            b, _ = dio.read_image(clean[name])
            if args.mode == "raw-bayer":
                a, b = to_packed(a, args.mode), to_packed(b, args.mode)
            result.add(name, a, b)
        except (FormatError, ShapeError) as exc:
            print(f"error: {name}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    out = Path(args.out or den_dir / "report")
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(result, out / "summary.csv")
    _emit("image", "psnr_db", "ssim")
    for name, p, s in zip(result.names, result.psnr, result.ssim):
        _emit(name, _fmt(capped(p)), _fmt(s))
    _emit("mean", _fmt(result.mean_psnr), _fmt(result.mean_ssim))
    return EXIT_OK


# ablate

def variant_config(cfg: RunConfig, local: bool, sne: bool) -> RunConfig:
    stack = dataclasses.replace(cfg.model.stack, enable_local=local)
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, stack=stack, sne_enabled=sne))


def audit_variants(cfg: RunConfig) -> dict[str, list[str]]:
    """Parameter names each variant drops relative to the full model.

    Raises :class:`ConfigError` if a toggle removes anything outside its own
    subgraph (``.local.`` for the local branch, ``sne.`` for the SNE).
    """
    full = set(DenoiserModel.build(variant_config(cfg, True, True).model).params.names())
    dropped = {}
    for name, local, sne in VARIANTS:
        names = set(DenoiserModel.build(variant_config(cfg, local, sne).model).params.names())
        if names - full:
            raise ConfigError(f"variant {name} adds parameters {sorted(names - full)[:3]}")
        gone = sorted(full - names)
        allowed = lambda n: (not local and ".local." in n) or (not sne and n.startswith("sne."))
        stray = [n for n in gone if not allowed(n)]
        expected = [n for n in full if allowed(n)]
        if stray or sorted(expected) != gone:
            raise ConfigError(f"variant {name} touches unexpected parameters: {stray[:3]}")
        dropped[name] = gone
    return dropped


def run_ablation(cfg: RunConfig, on_row=None) -> list[dict]:
    data = load_train_data(cfg)
    if not data.val:
        raise ConfigError("ablation needs validation images with clean references")
    rows = []
    for seed in cfg.ablation.seeds:
        for name, local, sne in VARIANTS:
            vcfg = variant_config(cfg, local, sne)
            tcfg = dataclasses.replace(vcfg.train, seed=seed)
            model = DenoiserModel.build(vcfg.model, seed)
            res = train(model, data, tcfg)
            last = res.curve[-1]
            row = {"variant": name, "seed": seed, "psnr": last["val_psnr"], "ssim": last["val_ssim"],
                   "noisy_psnr": last["noisy_psnr"], "params": model.params.num_parameters()}
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def summarize_ablation(rows: list[dict]) -> dict:
    means = {}
    for name, _, _ in VARIANTS:
        vals = [r for r in rows if r["variant"] == name]
        means[name] = {"psnr": float(np.mean([r["psnr"] for r in vals])),
                       "ssim": float(np.mean([r["ssim"] for r in vals]))}
    p = {k: v["psnr"] for k, v in means.items()}
    return {"means": means,
            "ordering_ok": p["+CADT+SNE"] >= p["+CADT"] >= p["baseline"],
            "cadt_gain_db": p["+CADT"] - p["baseline"]}


def cmd_ablate(args) -> int:
    try:
        cfg = load_config(args.config, args.preset or "toy")
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation, seeds=(args.seed,)))
        dropped = audit_variants(cfg)
        out = _out_dir(args, cfg, "ablation")
        (out / "config.json").write_text(dataclasses.replace(cfg, out=str(out)).dumps())
        _emit("variant", "seed", "psnr_db", "ssim", "noisy_psnr_db", "params")
        rows = run_ablation(cfg, on_row=lambda r: _emit(
            r["variant"], r["seed"], _fmt(r["psnr"]), _fmt(r["ssim"]), _fmt(r["noisy_psnr"]), r["params"]))
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = summarize_ablation(rows)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary["dropped_parameters"] = {k: len(v) for k, v in dropped.items()}
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    report = out / "report"
    report.mkdir(exist_ok=True)
    from .plotting import plot_ablation
    plot_ablation(rows, report / "ablation")
    _emit("mean", "variant", "psnr_db", "ssim")
    for name, m in summary["means"].items():
        _emit("mean", name, _fmt(m["psnr"]), _fmt(m["ssim"]))
    _emit("ordering", "ok" if summary["ordering_ok"] else "VIOLATED",
          "cadt_gain_db", _fmt(summary["cadt_gain_db"], 3))
    return EXIT_OK


# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denoise-transformer",
                                     description="Self-supervised blind-spot transformer denoiser.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset_default=None):
        p.add_argument("--config", help="JSON run config (strict schema)")
        p.add_argument("--preset", choices=PRESETS, default=preset_default,
                       help="starting config the file is applied on")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise every image in a directory")
    p.add_argument("checkpoint")
    p.add_argument("input", help="directory of noisy images")
    p.add_argument("--out", help="output directory (default ./denoised)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM of denoised images against clean ones")
    p.add_argument("denoised")
    p.add_argument("clean")
    p.add_argument("--out", help="report directory (default <denoised>/report)")
    p.add_argument("--mode", choices=("image", "raw-bayer"), default="image",
                   help="raw-bayer scores mosaics in the packed 4-plane domain")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four branch/SNE variants and compare")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DenoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
