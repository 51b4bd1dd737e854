"""Command-line entry points: gen-data, train, sample, eval.

Config resolution order is defaults < --config JSON file < explicit flags.
Every command writes the fully resolved configuration plus content hashes of
its inputs next to its outputs. Exit codes: 0 success, 2 configuration
error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, TrainingFault
from .metrics import CameraFilter
from .morphable import MorphCoeffs
from .pipeline import MultiViewPipeline, default_pipeline_config
from .synthdata import DatasetConfig, build_dataset, load_dataset, write_dataset
from .trainer import TrainConfig, train
from .utils import config_hash, make_generator, sha256_bytes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file is not valid JSON: {e}") from None


def _merge(section: dict, overrides: dict) -> dict:
    out = dict(section)
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def _write_run_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = dict(resolved)
    resolved["resolved_hash"] = config_hash(resolved)
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=1,
                                                        sort_keys=True))


def cmd_gen_data(args) -> int:
    file_cfg = _load_config_file(args.config).get("dataset", {})
    overrides = {
        "subjects": args.subjects,
        "expressions": args.expressions,
        "views": args.views,
        "image_size": args.image_size,
        "seed": args.seed,
    }
    cfg = DatasetConfig(**_merge(file_cfg, overrides))
    dataset = build_dataset(cfg)
    manifest_hash = write_dataset(dataset, args.out, force=args.force)
    print(f"dataset written to {args.out} (manifest {manifest_hash[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    dataset = load_dataset(args.data)
    pipe_kwargs = dict(cfg_file.get("pipeline", {}))
    if "channels" in pipe_kwargs:
        pipe_kwargs["channels"] = tuple(pipe_kwargs["channels"])
    ddim_steps = pipe_kwargs.pop("ddim_steps", None)
    pipeline_cfg = default_pipeline_config(dataset.config, **pipe_kwargs)
    if ddim_steps is not None:
        pipeline_cfg.ddim_steps = int(ddim_steps)

    shuffled = None if args.shuffled is None else (args.shuffled == "on")
    overrides = {
        "total_steps": args.steps,
        "seed": args.seed,
        "shuffled": shuffled,
    }
    train_section = _merge(cfg_file.get("train", {}), overrides)
    if args.exclude_expression:
        train_section["expression_exclusions"] = tuple(
            train_section.get("expression_exclusions", ())) + tuple(args.exclude_expression)
    train_cfg = TrainConfig(**train_section)

    pipeline = MultiViewPipeline.from_dataset(
        dataset, pipeline_cfg, init_seed=train_cfg.seed)
    out_dir = Path(args.out)
    _write_run_config(out_dir, {
        "command": "train",
        "dataset_manifest": json.loads((Path(args.data) / "manifest.json")
                                       .read_text())["manifest_hash"],
        "pipeline": pipeline_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    })
    result = train(dataset, pipeline, train_cfg, out_dir, resume_from=args.resume)
    print(f"trained {len(result.losses)} steps; final checkpoint "
          f"{result.final_checkpoint}")
    return EXIT_OK


def _load_image(path) -> torch.Tensor:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def _save_grid(images: torch.Tensor, path, columns: int = 8) -> None:
    from PIL import Image

    n, h, w, _ = images.shape
    cols = min(columns, n)
    rows = (n + cols - 1) // cols
    grid = np.ones((rows * h, cols * w, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i].numpy()
    Image.fromarray((grid * 255.0).round().astype(np.uint8)).save(path)


def cmd_sample(args) -> int:
    pipeline, meta, _ = MultiViewPipeline.load_checkpoint(args.checkpoint)
    input_image = _load_image(args.input_image)
    h, w = pipeline.config.denoiser.image_size
    if tuple(input_image.shape[:2]) != (h, w):
        raise ConfigurationError(
            f"input image is {tuple(input_image.shape[:2])}, checkpoint wants {(h, w)}")
    coeffs_raw = json.loads(Path(args.coeffs).read_text())
    coeffs = MorphCoeffs(identity=coeffs_raw["identity"],
                         expression=coeffs_raw["expression"])
    mesh = pipeline.mesh_for(coeffs)
    steps = args.steps if args.steps is not None else pipeline.config.ddim_steps
    seed = args.seed if args.seed is not None else 0
    images = pipeline.sample(input_image, mesh, steps=steps,
                             generator=make_generator(seed, "sample"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_path = out_dir / "views.png"
    _save_grid(images, grid_path)
    sidecar = {
        "seed": seed,
        "steps": steps,
        "eta": 0.0,
        "schedule_hash": meta["schedule_hash"],
        "rig_hash": meta["rig_hash"],
        "checkpoint_config_hash": meta["config_hash"],
        "input_image": str(args.input_image),
        "input_image_sha256": sha256_bytes(Path(args.input_image).read_bytes()),
        "coeffs": coeffs_raw,
        "views": images.shape[0],
    }
    (out_dir / "views.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    print(f"wrote {grid_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_checkpoint

    dataset = load_dataset(args.data)
    pipeline, meta, _ = MultiViewPipeline.load_checkpoint(args.checkpoint)
    if meta["rig_hash"] != dataset.rig_hash() and not args.allow_mismatch:
        raise ConfigurationError(
            "checkpoint rig does not match the dataset rig "
            "(pass --allow-mismatch to evaluate anyway)")
    filt = CameraFilter(max_azimuth_deg=args.max_azimuth,
                        max_elevation_deg=args.max_elevation)
    report = evaluate_checkpoint(
        pipeline, dataset, camera_filter=filt, seed=args.seed or 0,
        items=args.items, subject_pool=args.subject_pool,
        target_expression=args.target_expression,
        use_ground_truth=args.use_ground_truth,
        checkpoint_hash=sha256_bytes(Path(args.checkpoint).read_bytes()))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(report.to_json())
    print(report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphview",
        description="Mesh-conditioned multi-view diffusion on synthetic subjects")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config", type=str, default=None)
    g.add_argument("--out", type=str, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.add_argument("--subjects", type=int, default=None)
    g.add_argument("--expressions", type=int, default=None)
    g.add_argument("--views", type=int, default=None)
    g.add_argument("--image-size", dest="image_size", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--data", type=str, required=True)
    t.add_argument("--out", type=str, required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--shuffled", choices=["on", "off"], default=None)
    t.add_argument("--exclude-expression", action="append", default=None,
                   metavar="NAME")
    t.add_argument("--resume", type=str, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate the rig views from one image")
    s.add_argument("--checkpoint", type=str, required=True)
    s.add_argument("--input-image", dest="input_image", type=str, required=True)
    s.add_argument("--coeffs", type=str, required=True,
                   help="JSON file with identity/expression coefficient arrays")
    s.add_argument("--out", type=str, required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--out", type=str, required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--items", type=int, default=4)
    e.add_argument("--subject-pool", choices=["train", "test"], default="test")
    e.add_argument("--target-expression", type=str, default=None)
    e.add_argument("--max-azimuth", dest="max_azimuth", type=float, default=None)
    e.add_argument("--max-elevation", dest="max_elevation", type=float, default=None)
    e.add_argument("--allow-mismatch", action="store_true")
    e.add_argument("--use-ground-truth", action="store_true",
                   help="score ground-truth renders against themselves (sanity mode)")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as e:
        print(f"training fault: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError) as e:
        print(f"runtime fault: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
