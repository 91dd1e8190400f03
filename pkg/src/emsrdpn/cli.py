"""``emsrdpn`` command line: degrade, train, infer, eval, count.

Exit codes: 0 success, 1 I/O or runtime failure, 2 invalid configuration or
arguments, 3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .accounting import cost_report
from .checkpoint import CheckpointError, load_checkpoint
from .image import (SUPPORTED_SCALES, _list_images, bicubic_resize, build_manifest, degrade,
                    load_image, save_image)
from .metrics import EvalReport, psnr, ssim
from .network import ConfigError, NetworkConfig, forward_multi, self_ensemble
from .tensor import Tensor
from .training import NonFiniteLossError, TrainConfig, train_loop

log = logging.getLogger("emsrdpn")


class UsageError(Exception):
    """Invalid arguments detected before any work starts (exit 2)."""


def parse_scales(text: str | None):
    if text is None:
        return None
    try:
        scales = tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError:
        raise UsageError(f"--scales must be a comma-separated list of integers, got {text!r}")
    bad = [s for s in scales if s not in SUPPORTED_SCALES]
    if bad or not scales:
        raise UsageError(f"scales must be drawn from {SUPPORTED_SCALES}, got {text!r}")
    return scales


def load_run_config(args) -> tuple[NetworkConfig, TrainConfig]:
    """Defaults, then the JSON file, then command-line overrides."""
    net, train = {}, {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        unknown = set(doc) - {"network", "train"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        net, train = dict(doc.get("network", {})), dict(doc.get("train", {}))
    scales = parse_scales(args.scales)
    if scales:
        net["scales"] = scales
    if args.seed is not None:
        train["seed"] = args.seed
    for key in ("iterations", "batch_size", "patch_size", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    try:
        return NetworkConfig.from_dict(net), TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}")


def default_config_document() -> dict:
    return {"network": NetworkConfig().to_dict(), "train": TrainConfig().to_dict()}


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _to_tensor(img: np.ndarray) -> Tensor:
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return Tensor.wrap(np.ascontiguousarray(img.transpose(2, 0, 1)[None].astype(np.float32)))


def _to_image(t: Tensor) -> np.ndarray:
    return np.clip(t.data[0].transpose(1, 2, 0).astype(np.float64), 0.0, 1.0)


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}")


def _check_scales(requested, config: NetworkConfig):
    requested = requested or config.scales
    missing = [s for s in requested if s not in config.scales]
    if missing:
        raise UsageError(f"checkpoint has no heads for scales {missing} (available: {list(config.scales)})")
    return tuple(requested)


# --------------------------------------------------------------------------
# subcommands


def cmd_degrade(args) -> int:
    hr_dir = Path(args.hr_dir)
    scales = parse_scales(args.scales) or (2, 3, 4)
    images = _list_images(hr_dir)
    if not images:
        log.error("no images found in %s", hr_dir)
        return 1
    root = Path(args.out) if args.out else hr_dir.parent
    ok = 0
    for stem, path in images.items():
        try:
            hr = load_image(path)
        except OSError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        for s in scales:
            d = root / f"LR_x{s}"
            d.mkdir(parents=True, exist_ok=True)
            lr = degrade(hr, s)
            suffix = ".png" if args.format == "png" else (".ppm" if lr.shape[2] == 3 else ".pgm")
            save_image(lr, d / f"{stem}{suffix}")
        ok += 1
    log.info("degraded %d of %d images at scales %s", ok, len(images), list(scales))
    return 0 if ok else 1


def cmd_train(args) -> int:
    net, tcfg = load_run_config(args)
    out = _out_dir(args)
    try:
        manifest = build_manifest(args.data, net.scales, strict=True, on_the_fly=args.on_the_fly or tcfg.on_the_fly)
    except FileNotFoundError as exc:
        raise UsageError(str(exc))
    _write_text(out / "config.json", json.dumps({"network": net.to_dict(), "train": tcfg.to_dict()},
                                                indent=2, sort_keys=True) + "\n")

    def report(it, s, loss):
        if it % max(1, tcfg.iterations // 20) == 0:
            log.info("iter %d  x%d  loss %.5f", it, s, loss)

    try:
        result = train_loop(manifest, net, tcfg, out_dir=out, resume=args.resume,
                            deterministic=args.deterministic, on_step=report)
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        return 3
    except CheckpointError as exc:
        raise UsageError(str(exc))
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    if records and not args.no_plots:
        from .plotting import plot_training_log

        plot_training_log(records, out / "loss_curve.png")
    log.info("final checkpoint: %s", result.checkpoints[-1])
    return 0


def cmd_infer(args) -> int:
    config, params, _, _ = _load_model(args.checkpoint)
    scales = _check_scales(parse_scales(args.scales), config)
    out = _out_dir(args)
    img = load_image(args.image)
    x = _to_tensor(img)
    if args.self_ensemble:
        outputs = {s: self_ensemble(x, s, params, config) for s in scales}
    else:
        outputs = forward_multi(x, params, config, scales)
    stem = Path(args.image).stem
    for s, y in outputs.items():
        path = out / f"{stem}_x{s}.{args.format}"
        save_image(_to_image(y), path)
        log.info("wrote %s (%dx%d)", path, y.shape[2], y.shape[3])
    return 0


def cmd_eval(args) -> int:
    requested = parse_scales(args.scales)
    config = params = None
    if args.mode == "net":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --mode is oracle or bicubic")
        config, params, _, _ = _load_model(args.checkpoint)
        scales = _check_scales(requested, config)
    else:
        scales = requested or (2, 3, 4)
    try:
        manifest = build_manifest(args.data, scales, strict=False)
    except FileNotFoundError as exc:
        raise UsageError(str(exc))
    out = _out_dir(args)
    report = EvalReport(crop=args.crop)
    for i in range(len(manifest)):
        for s in scales:
            if s not in manifest.lr_paths[i]:
                continue
            try:
                lr, hr = manifest.pair(i, s)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s x%d: %s", manifest.name(i), s, exc)
                continue
            if args.mode == "oracle":
                pred = hr
            elif args.mode == "bicubic":
                pred = bicubic_resize(lr, *hr.shape[:2])
            else:
                y = forward_multi(_to_tensor(lr), params, config, (s,))[s]
                pred = _to_image(y)
            pred = np.round(np.clip(pred, 0, 1) * 255) / 255
            report.add(manifest.name(i), s, psnr(pred, hr, s, args.crop), ssim(pred, hr, s, args.crop))
    if not report.rows:
        log.error("nothing to evaluate")
        return 1
    text = report.to_text()
    _write_text(out / "eval_report.txt", text)
    _write_text(out / "eval_report.json", report.to_json())
    if not args.no_plots:
        from .plotting import plot_eval_report

        plot_eval_report(report, out / "eval_psnr.png")
    sys.stdout.write(text)
    return 0


def cmd_count(args) -> int:
    if args.print_defaults:
        sys.stdout.write(json.dumps(default_config_document(), indent=2, sort_keys=True) + "\n")
        return 0
    if args.full:
        scales = parse_scales(args.scales) or (2, 3, 4, 8)
        config = NetworkConfig.full(scales)
    else:
        config, _ = load_run_config(args)
    report = cost_report(config, args.height, args.width)
    sys.stdout.write(report.to_json() if args.json else report.to_text())
    if args.out:
        out = _out_dir(args)
        _write_text(out / "cost_report.json", report.to_json())
        _write_text(out / "cost_report.txt", report.to_text())
        if not args.no_plots:
            from .plotting import plot_cost_report

            plot_cost_report(report, out / "cost_flops.png")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON document with 'network' and 'train' sections")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--deterministic", action="store_true",
                        help="single-threaded, byte-reproducible outputs")
    shared.add_argument("--scales", help="comma-separated scale list, e.g. 2,3,4")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--no-plots", action="store_true", help="skip writing figures")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emsrdpn", description="Multi-scale super-resolution: degrade, train, infer, eval, count.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", parents=[shared], help="write bicubic LR images for an HR folder")
    d.add_argument("hr_dir")
    d.add_argument("--format", choices=("png", "ppm"), default="png")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", parents=[shared], help="train on <data>/HR + <data>/LR_x{s}")
    t.add_argument("--data", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.add_argument("--on-the-fly", action="store_true", help="degrade HR images instead of reading LR files")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[shared], help="super-resolve one image")
    i.add_argument("image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--self-ensemble", action="store_true")
    i.add_argument("--format", choices=("png", "ppm"), default="png")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[shared], help="PSNR/SSIM on the Y channel")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--crop", type=int, help="border pixels ignored per side (default: the scale)")
    e.add_argument("--mode", choices=("net", "oracle", "bicubic"), default="net",
                   help="oracle feeds HR as prediction; bicubic evaluates plain upsampling")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", parents=[shared], help="parameter / flop / activation accounting")
    c.add_argument("--height", type=int, default=256)
    c.add_argument("--width", type=int, default=256)
    c.add_argument("--full", action="store_true", help="D=16, C=4, G_r=G_d=G=64")
    c.add_argument("--json", action="store_true")
    c.add_argument("--print-defaults", action="store_true")
    c.set_defaults(func=cmd_count)
    return p


def _limit_threads(deterministic: bool):
    n = os.environ.get("EMSRDPN_THREADS")
    limit = 1 if deterministic else (int(n) if n else None)
    if limit is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if getattr(args, "crop", None) is not None and args.crop < 0:
        parser.error("--crop must be non-negative")
    limiter = _limit_threads(args.deterministic)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
