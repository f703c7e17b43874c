"""Dataset files: generated scenes with features, poses, and truth boxes.

Byte layout:

    magic           b"BEVFUSE-DATASET-V1\\n"
    header_len      u64 little-endian
    header          UTF-8 JSON, header_len bytes
    blob            concatenated raw feature blocks

The header holds the generator config, and per scene its id, seed, and
per-frame records (frame_index, ego pose [x, y, yaw], truth boxes as
[class_id, row, col, w, l, vr, vc], byte offset into the blob). Each
feature block is the frame's [H,W,C] array as little-endian float64 in
row-major order, so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import EgoPose
from .scene import BevFeature, GenConfig, TruthBox, generate_scene

DATASET_MAGIC = b"BEVFUSE-DATASET-V1\n"


class DatasetError(ValueError):
    """Dataset file is malformed; messages name the scene/frame at fault."""


@dataclass(eq=False)
class SceneRecord:
    scene_id: int
    seed: int
    frames: list[BevFeature]
    truths: list[list[TruthBox]]


def generate_dataset(cfg: GenConfig, num_scenes: int, seed: int, first_scene_id: int = 0) -> list[SceneRecord]:
    scenes = []
    for i in range(num_scenes):
        sid = first_scene_id + i
        frames, truths = generate_scene(cfg, seed, sid)
        scenes.append(SceneRecord(scene_id=sid, seed=seed, frames=frames, truths=truths))
    return scenes


def write_dataset(path, cfg: GenConfig, scenes: list[SceneRecord]) -> None:
    index = []
    offset = 0
    frame_bytes = cfg.h * cfg.w * cfg.channels * 8
    for scene in scenes:
        frames_meta = []
        for bev, gts in zip(scene.frames, scene.truths):
            frames_meta.append(
                {
                    "frame_index": bev.frame_index,
                    "ego": [bev.ego.x, bev.ego.y, bev.ego.yaw],
                    "truths": [[g.class_id, g.row, g.col, g.w, g.l, g.vr, g.vc] for g in gts],
                    "offset": offset,
                }
            )
            offset += frame_bytes
        index.append({"scene_id": scene.scene_id, "seed": scene.seed, "frames": frames_meta})
    header = json.dumps({"cfg": cfg.to_dict(), "scenes": index}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for scene in scenes:
            for bev in scene.frames:
                f.write(np.ascontiguousarray(bev.feat, dtype="<f8").tobytes())


def read_dataset(path) -> tuple[GenConfig, list[SceneRecord]]:
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        raw = f.read(8)
        if len(raw) != 8:
            raise DatasetError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        header_bytes = f.read(hlen)
        if len(header_bytes) != hlen:
            raise DatasetError(f"{path}: truncated JSON header")
        try:
            header = json.loads(header_bytes)
            cfg = GenConfig.from_dict(header["cfg"])
            index = header["scenes"]
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetError(f"{path}: unreadable header ({e})") from e
        blob = f.read()

    shape = (cfg.h, cfg.w, cfg.channels)
    frame_bytes = cfg.h * cfg.w * cfg.channels * 8
    scenes = []
    for entry in index:
        sid = entry["scene_id"]
        frames, truths = [], []
        for fm in entry["frames"]:
            fi = fm["frame_index"]
            off = fm["offset"]
            if off + frame_bytes > len(blob):
                raise DatasetError(f"{path}: scene {sid} frame {fi}: feature block truncated")
            feat = np.frombuffer(blob[off : off + frame_bytes], dtype="<f8").reshape(shape).copy()
            ex, ey, eyaw = fm["ego"]
            frames.append(BevFeature(feat=feat, scene_id=sid, frame_index=fi, ego=EgoPose(ex, ey, eyaw)))
            truths.append([TruthBox(int(t[0]), *map(float, t[1:])) for t in fm["truths"]])
        scenes.append(SceneRecord(scene_id=sid, seed=entry["seed"], frames=frames, truths=truths))
    return cfg, scenes
