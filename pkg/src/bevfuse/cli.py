"""Command line entry points.

One JSON config document drives everything; sections and their
defaults:

  gen      scene generator fields (see GenConfig); all optional
  model    detector fields; channels/num_classes/cell_size default to
           the generator's values
  train    epochs, phase1_epochs, lr, weight_decay, betas, seed,
           score_thresh, max_dets
  dataset  num_scenes (default 8), seed (default 0)
  ablate   seeds, arms, train_scenes, eval_scenes

``--seed`` overrides both the dataset seed and the training seed, so a
single flag reruns an experiment end to end.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import read_dataset, write_dataset, generate_dataset
from .model import ModelConfig, build_detector
from .params import load_checkpoint, save_checkpoint
from .scene import GenConfig
from .train import (
    AblateConfig,
    TrainConfig,
    ablate,
    evaluate_model,
    run_sequence,
    train,
    write_ablate_csv,
    write_eval_csv,
    write_train_csv,
)

DATASET_FILENAME = "dataset.bin"


class CliError(RuntimeError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    return cfg


def _gen_config(cfg: dict) -> GenConfig:
    return GenConfig.from_dict(cfg.get("gen", {}))


def _model_config(cfg: dict, gen: GenConfig) -> ModelConfig:
    fields = {
        "channels": gen.channels,
        "num_classes": gen.num_classes,
        "cell_size": gen.cell_size,
    }
    fields.update(cfg.get("model", {}))
    return ModelConfig.from_dict(fields)


def _train_config(cfg: dict, model: ModelConfig, seed: int | None) -> TrainConfig:
    fields = dict(cfg.get("train", {}))
    fields["model"] = model.to_dict()
    if seed is not None:
        fields["seed"] = seed
    return TrainConfig.from_dict(fields)


def _dataset_path(data_dir: str) -> Path:
    path = Path(data_dir) / DATASET_FILENAME
    if not path.exists():
        raise CliError(f"no {DATASET_FILENAME} under {data_dir}")
    return path


def _cmd_generate(args) -> None:
    cfg = _load_config(args.config)
    gen = _gen_config(cfg)
    ds = cfg.get("dataset", {})
    seed = args.seed if args.seed is not None else ds.get("seed", 0)
    num_scenes = ds.get("num_scenes", 8)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(gen, num_scenes, seed)
    out = out_dir / DATASET_FILENAME
    write_dataset(out, gen, scenes)
    frames = sum(len(s.frames) for s in scenes)
    print(f"wrote {out} ({len(scenes)} scenes, {frames} frames, seed {seed})")


def _cmd_train(args) -> None:
    cfg = _load_config(args.config)
    gen_cfg, scenes = read_dataset(_dataset_path(args.data))
    model_cfg = _model_config(cfg, gen_cfg)
    train_cfg = _train_config(cfg, model_cfg, args.seed)
    store, _, report = train(train_cfg, scenes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, store, meta={"model": model_cfg.to_dict(), "seed": train_cfg.seed})
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    write_train_csv(metrics_path, report)
    print(f"wrote {out} and {metrics_path} ({len(report.steps)} steps, final loss {report.final_loss():.6g})")


def _build_from_checkpoint(ckpt_path: str):
    state, meta = load_checkpoint(ckpt_path)
    if "model" not in meta:
        raise CliError(f"{ckpt_path} has no model description; re-train with this tool")
    model_cfg = ModelConfig.from_dict(meta["model"])
    store, detector = build_detector(model_cfg, seed=int(meta.get("seed", 0)))
    store.load_state_dict(state)
    return model_cfg, detector


def _cmd_eval(args) -> None:
    gen_cfg, scenes = read_dataset(_dataset_path(args.data))
    _, detector = _build_from_checkpoint(args.ckpt)
    report = evaluate_model(
        detector,
        scenes,
        corrupt_kind=args.corrupt,
        gen_cfg=gen_cfg if args.corrupt else None,
        corrupt_seed=args.seed if args.seed is not None else 0,
    )
    write_eval_csv(args.report, report)
    print(f"wrote {args.report} (mAP {report.detection.mean_ap:.6g})")


def _cmd_ablate(args) -> None:
    cfg = _load_config(args.config)
    gen = _gen_config(cfg)
    model_cfg = _model_config(cfg, gen)
    train_cfg = _train_config(cfg, model_cfg, args.seed)
    ab = dict(cfg.get("ablate", {}))
    if "seeds" in ab:
        ab["seeds"] = tuple(ab["seeds"])
    if "arms" in ab:
        ab["arms"] = tuple(ab["arms"])
    rows = ablate(AblateConfig(gen=gen, train=train_cfg, **ab))
    write_ablate_csv(args.out, rows)
    print(f"wrote {args.out} ({len(rows)} rows)")


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM from values in [0, 1]."""
    q = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _cmd_dump_heatmaps(args) -> None:
    _, scenes = read_dataset(_dataset_path(args.data))
    _, detector = _build_from_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for scene in scenes:
        steps = run_sequence(detector, scene.frames, decode=False)
        for bev, step in zip(scene.frames, steps):
            heat = step.output.heat.data
            for c in range(heat.shape[2]):
                name = f"scene{scene.scene_id}_frame{bev.frame_index}_class{c}.pgm"
                write_pgm(out_dir / name, heat[:, :, c])
                count += 1
    print(f"wrote {count} heatmaps to {out_dir}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevfuse", description="Recurrent BEV fusion toybox")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every configured seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a detector on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True, help="directory holding dataset.bin")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--metrics", default=None, help="metrics CSV (default: next to the checkpoint)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="CSV report path")
    e.add_argument("--corrupt", choices=("motion_blur", "occlusion"), default=None)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run the method comparison grid")
    a.add_argument("--config", default=None)
    a.add_argument("--out", required=True, help="CSV output path")
    a.set_defaults(func=_cmd_ablate)

    d = sub.add_parser("dump-heatmaps", parents=[common], help="write per-class heatmaps as PGM images")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=_cmd_dump_heatmaps)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # any failure must leave a nonzero exit code
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
