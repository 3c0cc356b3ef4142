"""Command line interface: ``rmnet {train,eval,inpaint,make-masks,ablate}``."""

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import CorruptCheckpointError, load_checkpoint, load_generator
from .config import ConfigError, RunConfig, dump_config, load_config, resolve_cached
from .data import (ImageDecodeError, list_images, load_images, load_split, preprocess, read_image,
                   synthetic_images, to_model_range, to_uint8, write_png)
from .losses import build_extractor
from .mask_synthesis import (FULL_RANGE, HoleRatioBucket, MaskSourceConfig, StrokeSpec,
                             load_mask_file, sample_mask_in_bucket)
from .masking import apply_mask, composite, hole_ratio
from .metrics import build_embedder, evaluate, generator_predictor
from .plotting import (plot_ablation, plot_bucket_metrics, plot_hole_ratios, plot_loss_curves,
                       save_comparison_grid)
from .training import TrainingData, train

log = logging.getLogger("rmnet")

DEFAULT_LAMBDAS = (0.0, 0.1, 0.3, 0.4, 0.5)
ABLATION_FIELDS = ("lambda", "FID", "MAE", "PSNR", "SSIM", "n", "status", "error")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _load_cfg(config_path, seed=None, out=None, need_out=True) -> RunConfig:
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output_dir"] = str(out)
    cfg = load_config(config_path, overrides)
    if need_out and not cfg.output_dir:
        raise ConfigError(["no output directory: set [run] output_dir or pass --out"])
    return cfg


def run_images(cfg: RunConfig):
    """(train images N x 3 x H x W in [-1, 1], test images N x H x W x 3 uint8, split).

    ``split`` is None for synthetic data.
    """
    _, _, split_seed, _ = cfg.seeds()
    size = cfg.image_size
    if cfg.data.synthetic:
        imgs = synthetic_images(cfg.data.synthetic, size, seed=split_seed)
        n_train = max(1, int(round(cfg.data.train_fraction * len(imgs))))
        train_u8, test_u8 = imgs[:n_train], imgs[n_train:]
        return to_model_range(train_u8).transpose(0, 3, 1, 2).copy(), test_u8, None
    split = load_split(cfg.data.root, cfg.data.train_fraction, split_seed, cfg.data.manifest, size)
    if not split.train:
        raise ValueError("training split is empty")
    train_x = load_images(split.paths("train"), size)
    test = [to_uint8(preprocess(p, size)) for p in split.paths("test")]
    test_u8 = np.stack(test) if test else np.zeros((0, *size, 3), np.uint8)
    return train_x, test_u8, split


def training_data(cfg: RunConfig, train_x) -> TrainingData:
    if not cfg.fixed_masks:
        return TrainingData(train_x, cfg.masks)
    bucket = HoleRatioBucket(*cfg.train.mask_bucket)
    masks = np.stack([sample_mask_in_bucket(cfg.masks, bucket, 200, seed=_child_seed(cfg.masks.seed, i))
                      for i in range(len(train_x))])
    return TrainingData(train_x, masks)


def _write_config(cfg: RunConfig, out: Path, config_path=None, split=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.ini").write_text(dump_config(cfg))
    if config_path is not None:
        shutil.copyfile(config_path, out / "config.original.ini")
    if split is not None:
        (out / "split.json").write_text(json.dumps(split.to_manifest(), indent=1) + "\n")


def _train_run(cfg: RunConfig, out: Path, train_x, resume=None):
    extractor = build_extractor(cfg.extractor_spec())
    state = load_checkpoint(resume) if resume else None
    if state is not None:
        state.config = replace(state.config, epochs=cfg.train.epochs,
                               max_generator_steps=cfg.train.max_generator_steps)
    t0 = time.perf_counter()
    state = train(cfg.train, training_data(cfg, train_x), gen_spec=cfg.generator,
                  critic_spec=cfg.critic, extractor=extractor, state=state, out_dir=out)
    if state.history:
        plot_loss_curves(state.history, out / "loss_curves.png")
    log.info("trained %d generator steps in %.1f s", state.step, time.perf_counter() - t0)
    return state


def cmd_train(config_path, seed=None, out=None, resume=None) -> int:
    try:
        cfg = _load_cfg(config_path, seed, out)
    except ConfigError as exc:
        _err(exc)
        return 2
    out = Path(cfg.output_dir)
    try:
        train_x, _, split = run_images(cfg)
    except (OSError, ValueError) as exc:
        _err(f"cannot load training data: {exc}")
        return 1
    _write_config(cfg, out, config_path, split)
    try:
        state = _train_run(cfg, out, train_x, resume)
    except (OSError, ValueError, FloatingPointError, CorruptCheckpointError) as exc:
        _err(exc)
        return 1
    print(f"trained {state.step} generator / {state.critic_steps} critic steps; "
          f"checkpoint at {out / 'checkpoint'}")
    return 0


def _eval_images(cfg: RunConfig, images_dir):
    if images_dir is not None:
        files = list_images(images_dir)
        if not files:
            raise ValueError(f"no images in {images_dir}")
        return np.stack([to_uint8(preprocess(Path(images_dir) / f, cfg.image_size)) for f in files])
    _, test_u8, _ = run_images(cfg)
    if len(test_u8) == 0:
        raise ValueError("test split is empty; pass --images")
    return test_u8


def _evaluate(cfg: RunConfig, generator, images_u8, out: Path):
    if cfg.eval.max_images:
        images_u8 = images_u8[:cfg.eval.max_images]
    buckets = [HoleRatioBucket(lo, hi) for lo, hi in cfg.eval.buckets]
    grid = []

    def keep(bucket, i, masked, output):
        if len(grid) < cfg.eval.grid_samples:
            grid.append((masked, output, images_u8[i]))

    report = evaluate(generator_predictor(generator), images_u8, cfg.masks, buckets,
                      build_embedder(cfg.embedder_spec()), seed=cfg.seeds()[3],
                      max_tries=cfg.eval.max_tries, on_sample=keep)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    plot_bucket_metrics(report, out / "metrics.png")
    if grid:
        save_comparison_grid(grid, out / "samples.png")
    if report.failures:
        (out / "failures.json").write_text(json.dumps(report.failures, indent=1))
    return report


def cmd_eval(checkpoint, config_path, seed=None, out=None, images=None) -> int:
    try:
        cfg = _load_cfg(config_path, seed, out)
    except ConfigError as exc:
        _err(exc)
        return 2
    out = Path(cfg.output_dir)
    try:
        generator = load_generator(resolve_cached(checkpoint))
        generator.spec.check_input_size(*cfg.image_size)
        images_u8 = _eval_images(cfg, images)
        report = _evaluate(cfg, generator, images_u8, out)
    except (OSError, ValueError, CorruptCheckpointError) as exc:
        _err(exc)
        return 1
    o = report.overall
    print(f"overall n={o.n}  FID={o.fid:.4f}  MAE={o.mae:.4f}  PSNR={o.psnr:.2f} dB  SSIM={o.ssim:.4f}")
    print(f"report written to {out / 'metrics.csv'}")
    return 0 if not report.failures else 1


def cmd_inpaint(checkpoint, image_path, mask_path, out_path) -> int:
    try:
        generator = load_generator(resolve_cached(checkpoint))
        img = read_image(image_path)
        h, w = img.shape[:2]
        mask = load_mask_file(mask_path, MaskSourceConfig(target_size=(h, w)))
    except (OSError, ValueError, CorruptCheckpointError) as exc:
        _err(exc)
        return 1
    try:
        generator.spec.check_input_size(h, w)
    except ValueError as exc:
        _err(f"image {w}x{h} is incompatible with the generator: {exc}")
        return 2
    x = torch.from_numpy(to_model_range(img).transpose(2, 0, 1)[None].copy())
    m = torch.from_numpy(mask[None, None].astype(np.float32))
    t0 = time.perf_counter()
    with torch.no_grad():
        pred = generator(apply_mask(x, m), m)[0].numpy().transpose(1, 2, 0)
    latency = time.perf_counter() - t0
    result = composite(img.astype(np.float64), to_uint8(pred).astype(np.float64), mask.astype(np.float64))
    write_png(out_path, result.astype(np.uint8))
    print(f"{out_path}: {w}x{h}, hole ratio {hole_ratio(mask):.3f}, inference {latency * 1000:.1f} ms")
    return 0


def cmd_make_masks(count, outdir, seed=0, bucket=FULL_RANGE, size=(256, 256), strokes=(1, 20),
                   thickness=(5, 15), config_path=None, max_tries=200) -> int:
    if config_path is not None:
        try:
            cfg = load_config(config_path, {"seed": seed}, check_paths=False)
        except ConfigError as exc:
            _err(exc)
            return 2
        source = cfg.masks
    else:
        source = MaskSourceConfig(target_size=tuple(size), seed=seed,
                                  strokes=StrokeSpec(num_strokes=strokes, thickness=thickness,
                                                     canvas=tuple(size)))
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ratios = []
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("filename", "hole_ratio", "seed"))
        for i in range(count):
            s = _child_seed(seed, i)
            try:
                mask = sample_mask_in_bucket(source, bucket, max_tries, seed=s)
            except Exception as exc:
                _err(exc)
                return 1
            name = f"mask_{i:05d}.png"
            # visible pixels bright, holes dark: reloads unchanged with the default polarity
            write_png(out / name, (mask * 255).astype(np.uint8))
            ratios.append(hole_ratio(mask))
            w.writerow((name, repr(ratios[-1]), s))
    plot_hole_ratios(ratios, out / "hole_ratios.png", bucket)
    print(f"wrote {count} masks to {out} (hole ratio {np.mean(ratios) if ratios else 0:.3f} mean)")
    return 0


def cmd_ablate(config_path, lambdas: Sequence[float] = DEFAULT_LAMBDAS, seed=None, out=None) -> int:
    try:
        cfg = _load_cfg(config_path, seed, out)
    except ConfigError as exc:
        _err(exc)
        return 2
    root = Path(cfg.output_dir)
    try:
        train_x, test_u8, split = run_images(cfg)
    except (OSError, ValueError) as exc:
        _err(f"cannot load data: {exc}")
        return 1
    eval_u8 = test_u8 if len(test_u8) else to_uint8(train_x.transpose(0, 2, 3, 1))
    _write_config(cfg, root, config_path, split)
    rows = []
    for lam in lambdas:
        run_out = root / f"lambda_{lam:g}"
        row = {"lambda": lam, "status": "ok", "error": ""}
        try:
            run_cfg = replace(cfg, train=replace(cfg.train, lam=float(lam)), output_dir=str(run_out))
            _write_config(run_cfg, run_out)
            state = _train_run(run_cfg, run_out, train_x)
            report = _evaluate(run_cfg, state.generator, eval_u8, run_out)
            o = report.overall
            row.update(FID=o.fid, MAE=o.mae, PSNR=o.psnr, SSIM=o.ssim, n=o.n)
        except Exception as exc:  # one failed lambda must not stop the others
            log.exception("ablation run lambda=%s failed", lam)
            row.update(status="failed", error=repr(exc))
        rows.append(row)
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in ABLATION_FIELDS})
    plot_ablation(rows, root / "ablation.png")
    done = [r["lambda"] for r in rows if r["status"] == "ok"]
    failed = [r["lambda"] for r in rows if r["status"] != "ok"]
    print(f"ablation: completed lambda={done}" + (f", failed lambda={failed}" if failed else ""))
    return 0 if not failed else 1


def _pair(conv):
    def parse(text):
        parts = [conv(p) for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) == 1:
            return (parts[0], parts[0])
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected one or two values, got {text!r}")
        return tuple(parts)
    return parse


def _bucket(text):
    lo, hi = _pair(float)(text)
    try:
        return HoleRatioBucket(lo, hi)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmnet", description="Reverse-masking GAN inpainting.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration (INI)")
        sp.add_argument("--seed", type=int, default=None, help="root seed (overrides [run] seed)")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    sp = sub.add_parser("eval", help="score a checkpoint on the test images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", default=None, help="directory of test images (default: test split)")

    sp = sub.add_parser("inpaint", help="inpaint one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True, help="mask PNG, dark strokes = holes")
    sp.add_argument("--out", required=True, help="output PNG")

    sp = sub.add_parser("make-masks", help="synthesise stroke masks")
    common(sp, config_required=False)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--bucket", type=_bucket, default=FULL_RANGE, help="hole ratio range lo,hi")
    sp.add_argument("--size", type=_pair(int), default=(256, 256), help="H,W")
    sp.add_argument("--strokes", type=_pair(int), default=(1, 20), help="stroke count or lo,hi")
    sp.add_argument("--thickness", type=_pair(int), default=(5, 15), help="lo,hi pixels")
    sp.add_argument("--max-tries", type=int, default=200)

    sp = sub.add_parser("ablate", help="train and evaluate once per loss weight")
    common(sp)
    sp.add_argument("--lambdas", type=lambda t: [float(v) for v in t.split(",")],
                    default=list(DEFAULT_LAMBDAS), help="comma separated")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.seed, args.out, args.resume)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.config, args.seed, args.out, args.images)
    if args.command == "inpaint":
        return cmd_inpaint(args.checkpoint, args.image, args.mask, args.out)
    if args.command == "make-masks":
        if args.out is None:
            _err("make-masks needs --out")
            return 2
        return cmd_make_masks(args.count, args.out, args.seed or 0, args.bucket, args.size,
                              args.strokes, args.thickness, args.config, args.max_tries)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.lambdas, args.seed, args.out)
    return 2


if __name__ == "__main__":
    sys.exit(main())
