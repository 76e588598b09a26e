"""Command-line entry point: synth, train, eval, render, export-camera."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from camsplat import autodiff as ad
from camsplat.camera import export_distortion, load_camera
from camsplat.evaluate import evaluate
from camsplat.imageio import write_png16
from camsplat.optimize.config import ConfigError, TrainConfig
from camsplat.optimize.training import resolve_background, train
from camsplat.scene import load_cloud, render
from camsplat.synth import (DatasetError, DistortionSpec, apply_distortion, load_dataset,
                            make_preset, render_clean, sparse_points, write_dataset)

log = logging.getLogger("camsplat")


class CliError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {p}")
    return p


def _load_run(run_dir: Path):
    for name in ("scene.npz", "camera.npz", "config.toml", "run.json"):
        if not (run_dir / name).is_file():
            raise CliError(f"run directory {run_dir} is missing {name}")
    config = TrainConfig.load(run_dir / "config.toml")
    info = json.loads((run_dir / "run.json").read_text())
    return config, info


def cmd_synth(args) -> None:
    w, h = args.size
    spec = DistortionSpec.load(args.spec) if args.spec else DistortionSpec()
    preset = make_preset(args.preset, n_gaussians=args.gaussians, n_views=args.views,
                         width=w, height=h, seed=args.seed)
    clean = render_clean(preset)
    distorted = apply_distortion(clean, spec)
    out = write_dataset(args.out, preset.views, clean, distorted, spec, preset.background,
                        sparse_points(preset.cloud, args.seed))
    load_dataset(out)  # refuse to report success on a dataset that does not load
    print(f"wrote {len(preset.views)} views to {out}")


def cmd_train(args) -> None:
    data = _existing_dir(args.data, "data")
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise CliError(f"config file not found: {cfg_path}")
        raw = cfg_path.read_bytes()
        config = TrainConfig.load(cfg_path)
    else:
        config = TrainConfig()
        raw = config.dumps().encode()
    if args.seed is not None and args.seed != config.seed:
        config = config.replace(seed=args.seed)
        raw = config.dumps().encode()
    dataset = load_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_bytes(raw)
    (out / "run.json").write_text(json.dumps({"data": str(data.resolve()), "seed": config.seed},
                                             indent=2, sort_keys=True))
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("camsplat").addHandler(handler)
    logging.getLogger("camsplat").setLevel(logging.INFO)
    try:
        result = train(dataset, config, out)
    finally:
        logging.getLogger("camsplat").removeHandler(handler)
        handler.close()
    rep = result.report
    print(f"trained {len(result.rows)} blocks; eval written to {out / 'eval.json'}")
    if rep is not None and rep.clean_psnr:
        print(f"clean-space PSNR {rep.mean_clean_psnr}")


def _data_for_run(args, info):
    return load_dataset(args.data if args.data else info["data"])


def cmd_eval(args) -> None:
    run = _existing_dir(args.run, "run")
    config, info = _load_run(run)
    dataset = _data_for_run(args, info)
    cloud = load_cloud(run / "scene.npz")
    camera = load_camera(run / "camera.npz") if config.camera_enabled else None
    report = evaluate(dataset, cloud, camera, config)
    out = Path(args.out) if args.out else run / "eval.json"
    out.write_text(report.to_json())
    print(f"clean-space PSNR {report.mean_clean_psnr}; wrote {out}")


def cmd_render(args) -> None:
    run = _existing_dir(args.run, "run")
    config, info = _load_run(run)
    dataset = _data_for_run(args, info)
    if not 0 <= args.view_index < len(dataset.views):
        raise CliError(f"view index {args.view_index} out of range 0..{len(dataset.views) - 1}")
    cloud = load_cloud(run / "scene.npz")
    bg = resolve_background(config, dataset)
    with ad.no_grad():
        img = render(cloud, dataset.views[args.view_index], bg).image
        if args.with_camera:
            img = load_camera(run / "camera.npz").apply(img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png16(out, np.clip(img.values, 0.0, 1.0))
    print(f"wrote {out}")


def cmd_export_camera(args) -> None:
    run = _existing_dir(args.run, "run")
    config, info = _load_run(run)
    if args.size:
        w, h = args.size
    else:
        dataset = _data_for_run(args, info)
        w, h = dataset.width, dataset.height
    maps = export_distortion(load_camera(run / "camera.npz"), w, h)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ranges = {}
    for name, arr in (("attenuation", maps.attenuation), ("beta_blurred", maps.beta_blurred),
                      ("gamma", maps.gamma), ("effective", maps.effective)):
        v_max = 1.0 if name in ("attenuation", "beta_blurred") else max(1.0, float(arr.max()))
        write_png16(out / f"{name}.png", arr, v_max)
        ranges[name] = {"file": f"{name}.png", "v_min": 0.0, "v_max": v_max,
                        "channels": int(arr.shape[2])}
    (out / "maps.json").write_text(json.dumps(ranges, indent=2, sort_keys=True))
    print(f"wrote camera maps to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic distorted dataset")
    p.add_argument("--preset", default="boxgrid")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--size", type=parse_size, default=(96, 96))
    p.add_argument("--gaussians", type=int, default=300)
    p.add_argument("--spec", help="distortion spec TOML (omit for an undistorted dataset)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="jointly fit scene and camera")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a run directory (read-only on checkpoints)")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="override the dataset recorded in the run")
    p.add_argument("--out", help="report path (default RUN/eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one dataset view from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--data")
    p.add_argument("--view-index", type=int, default=0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--scene-only", dest="with_camera", action="store_false")
    mode.add_argument("--with-camera", dest="with_camera", action="store_true")
    p.set_defaults(with_camera=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-camera", help="write the camera's distortion maps")
    p.add_argument("--run", required=True)
    p.add_argument("--data")
    p.add_argument("--size", type=parse_size)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_camera)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"camsplat: config error: {exc}", file=sys.stderr)
        return 3
    except DatasetError as exc:
        print(f"camsplat: dataset error: {exc}", file=sys.stderr)
        return 4
    except CliError as exc:
        print(f"camsplat: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"camsplat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())
