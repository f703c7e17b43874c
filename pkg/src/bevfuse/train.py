"""Sequential training loop, evaluation harness, and ablation runner.

Training walks scenes in a seeded shuffled order, one optimizer step
per scene. Within a scene, frames are processed in order; each frame's
loss is scaled by 1/T and backpropagated immediately (the memory bank
is detached, so no graph spans frames). Phase 1 disables the temporal
path entirely and fits backbone + heads on single frames; phase 2
switches the configured method on and, for the full method, adds the
consistency term on every frame after the scene start.

Everything downstream of (config, seed) is deterministic: RNG streams
are keyed by content tuples, never by call order, and CSV floats are
written with repr so equal runs produce equal bytes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .dataset import SceneRecord, generate_dataset
from .heads import focal_loss, htc_loss, l1_reg_loss, render_targets, total_loss
from .metrics import Detection, DetectionMetrics, alignment_error, decode_detections, evaluate
from .model import Detector, FrameOutput, ModelConfig, build_detector
from .params import AdamW, ParamStore
from .scene import BevFeature, GenConfig, corrupt

_STREAM_DROPOUT = 4
_STREAM_SHUFFLE = 5


class SequenceError(ValueError):
    """Frames handed to run_sequence are not one ordered scene."""


class TrainError(RuntimeError):
    pass


@dataclass(eq=False)
class SequenceStep:
    output: FrameOutput
    detections: list[Detection] | None
    alignment: float | None  # mean |Q_t - Qhat_t|, only when history exists


def run_sequence(
    detector: Detector,
    frames: list[BevFeature],
    train: bool = False,
    rng: np.random.Generator | None = None,
    use_fusion: bool = True,
    decode: bool = True,
    score_thresh: float = 0.1,
    max_dets: int = 32,
) -> list[SequenceStep]:
    """Process one scene start to finish; output at t never sees t+1."""
    if not frames:
        raise SequenceError("empty frame list")
    last_index = None
    scene_id = frames[0].scene_id
    state = detector.initial_state()
    steps = []
    for bev in frames:
        if bev.scene_id != scene_id:
            raise SequenceError(f"mixed scenes in one sequence: {scene_id} then {bev.scene_id}")
        if last_index is not None and bev.frame_index <= last_index:
            raise SequenceError(f"frame {bev.frame_index} after frame {last_index} is out of order")
        last_index = bev.frame_index
        out, state = detector.forward_frame(state, bev, train=train, rng=rng, use_fusion=use_fusion)
        dets = None
        align = None
        if decode:
            dets = decode_detections(out.heat.data, out.reg.data, score_thresh, max_dets)
            if out.h_hat is not None:
                q_hat = detector.heads.heatmap(out.h_hat)
                align = alignment_error(out.heat.data, q_hat.data)
        steps.append(SequenceStep(output=out, detections=dets, alignment=align))
    return steps


@dataclass
class TrainConfig:
    model: ModelConfig
    epochs: int = 6
    phase1_epochs: int = 1
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    score_thresh: float = 0.1
    max_dets: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ValueError("need 0 <= phase1_epochs <= epochs")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    scene_id: int
    phase: int
    loss: float
    cls: float
    reg: float
    cons: float


@dataclass
class TrainReport:
    steps: list[StepRecord] = field(default_factory=list)

    def final_loss(self) -> float:
        return self.steps[-1].loss if self.steps else float("nan")


def train(cfg: TrainConfig, scenes: list[SceneRecord]) -> tuple[ParamStore, Detector, TrainReport]:
    if not scenes:
        raise TrainError("empty dataset")
    if cfg.model.method == "baseline_m":
        shortest = min(len(s.frames) for s in scenes)
        if cfg.model.k_frames > shortest:
            raise TrainError(f"k_frames={cfg.model.k_frames} exceeds shortest scene ({shortest} frames)")
    store, detector = build_detector(cfg.model, cfg.seed)
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas)
    weights = cfg.model.loss_weights()
    report = TrainReport()
    step = 0
    for epoch in range(cfg.epochs):
        phase1 = epoch < cfg.phase1_epochs
        order = np.random.default_rng((cfg.seed, epoch, 0, _STREAM_SHUFFLE)).permutation(len(scenes))
        for idx in order:
            scene = scenes[idx]
            drop_rng = np.random.default_rng((cfg.seed, epoch, scene.scene_id, _STREAM_DROPOUT))
            store.zero_grad()
            step += 1
            t_frames = len(scene.frames)
            scale = Tensor(1.0 / t_frames)
            sums = np.zeros(4)  # loss, cls, reg, cons
            state = detector.initial_state()
            for fi, bev in enumerate(scene.frames):
                try:
                    out, state = detector.forward_frame(
                        state, bev, train=True, rng=drop_rng, use_fusion=not phase1
                    )
                    h_grid, w_grid, _ = bev.feat.shape
                    targets = render_targets(scene.truths[fi], h_grid, w_grid, detector.heads.num_classes)
                    l_cls = focal_loss(out.heat, targets.heat)
                    l_reg = l1_reg_loss(out.reg, targets)
                    if out.h_hat is not None and fi > 0 and weights.cons > 0:
                        l_cons = htc_loss(out.h, out.h_hat, detector.heads)
                    else:
                        l_cons = Tensor(0.0)
                    loss = total_loss(l_cls, l_reg, l_cons, weights)
                except NonFiniteError as e:
                    raise TrainError(
                        f"non-finite loss at step {step} (epoch {epoch}, scene {scene.scene_id}, frame {bev.frame_index})"
                    ) from e
                ad.mul(loss, scale).backward()
                sums += [float(loss.data), float(l_cls.data), float(l_reg.data), float(l_cons.data)]
            opt.step()
            means = sums / t_frames
            report.steps.append(
                StepRecord(
                    epoch=epoch,
                    step=step,
                    scene_id=scene.scene_id,
                    phase=1 if phase1 else 2,
                    loss=float(means[0]),
                    cls=float(means[1]),
                    reg=float(means[2]),
                    cons=float(means[3]),
                )
            )
    return store, detector, report


@dataclass
class EvalReport:
    detection: DetectionMetrics
    alignment: float  # nan for arms without an aligned history


def evaluate_model(
    detector: Detector,
    scenes: list[SceneRecord],
    score_thresh: float = 0.1,
    max_dets: int = 32,
    corrupt_kind: str | None = None,
    gen_cfg: GenConfig | None = None,
    corrupt_seed: int = 0,
) -> EvalReport:
    if corrupt_kind is not None and gen_cfg is None:
        raise ValueError("corruption needs the generator config")
    dets_per_frame: list[list[Detection]] = []
    gts_per_frame = []
    aligns: list[float] = []
    for scene in scenes:
        frames = scene.frames
        if corrupt_kind is not None:
            frames = [corrupt(b, corrupt_kind, corrupt_seed, gen_cfg) for b in frames]
        steps = run_sequence(
            detector, frames, train=False, decode=True, score_thresh=score_thresh, max_dets=max_dets
        )
        for s, gts in zip(steps, scene.truths):
            dets_per_frame.append(s.detections)
            gts_per_frame.append(gts)
            if s.alignment is not None:
                aligns.append(s.alignment)
    detection = evaluate(dets_per_frame, gts_per_frame)
    return EvalReport(detection=detection, alignment=float(np.mean(aligns)) if aligns else float("nan"))


# ---------------------------------------------------------------------------
# CSV writers (repr floats keep equal runs byte-identical)


def _fmt(v) -> str:
    # np.float64 is a float subclass but reprs as "np.float64(x)"; cast first
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_train_csv(path, report: TrainReport) -> None:
    lines = ["epoch,step,scene_id,phase,loss,cls,reg,cons"]
    for s in report.steps:
        lines.append(
            ",".join(_fmt(v) for v in (s.epoch, s.step, s.scene_id, s.phase, s.loss, s.cls, s.reg, s.cons))
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def write_eval_csv(path, report: EvalReport) -> None:
    lines = ["metric,class_id,threshold,value"]
    for (class_id, threshold), v in sorted(report.detection.ap.items()):
        lines.append(f"ap,{class_id},{_fmt(threshold)},{_fmt(v)}")
    lines.append(f"mean_ap,,,{_fmt(report.detection.mean_ap)}")
    lines.append(f"velocity_error,,,{_fmt(report.detection.velocity_error)}")
    lines.append(f"alignment_error,,,{_fmt(report.alignment)}")
    lines.append(f"num_gt,,,{report.detection.num_gt}")
    lines.append(f"num_pred,,,{report.detection.num_pred}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ablation runner


ABLATION_ARMS = {
    "baseline_s": {"method": "baseline_s"},
    "baseline_m_k2": {"method": "baseline_m", "k_frames": 2},
    "baseline_m_k5": {"method": "baseline_m", "k_frames": 5},
    "method_a": {"method": "method_a"},
    "method_b": {"method": "method_b"},
    "method_c": {"method": "method_c"},
}

EVAL_SCENE_ID_BASE = 10_000  # keeps eval scene content disjoint from training


@dataclass(frozen=True)
class AblationRow:
    arm: str
    seed: int
    mean_ap: float
    alignment: float
    param_count: int
    wall_time_s: float


@dataclass
class AblateConfig:
    gen: GenConfig
    train: TrainConfig
    seeds: tuple = (0, 1, 2, 3, 4)
    arms: tuple = tuple(ABLATION_ARMS)
    train_scenes: int = 8
    eval_scenes: int = 4

    def __post_init__(self):
        unknown = [a for a in self.arms if a not in ABLATION_ARMS]
        if unknown:
            raise ValueError(f"unknown ablation arms: {unknown}")


def ablate(cfg: AblateConfig) -> list[AblationRow]:
    rows = []
    for seed in cfg.seeds:
        train_set = generate_dataset(cfg.gen, cfg.train_scenes, seed)
        eval_set = generate_dataset(cfg.gen, cfg.eval_scenes, seed, first_scene_id=EVAL_SCENE_ID_BASE)
        for arm in cfg.arms:
            mcfg = replace(cfg.train.model, **ABLATION_ARMS[arm])
            tcfg = replace(cfg.train, model=mcfg, seed=seed)
            t0 = time.perf_counter()
            store, detector, _ = train(tcfg, train_set)
            ev = evaluate_model(detector, eval_set, tcfg.score_thresh, tcfg.max_dets)
            wall = time.perf_counter() - t0
            rows.append(
                AblationRow(
                    arm=arm,
                    seed=seed,
                    mean_ap=ev.detection.mean_ap,
                    alignment=ev.alignment,
                    param_count=store.num_values(),
                    wall_time_s=wall,
                )
            )
    return rows


def write_ablate_csv(path, rows: list[AblationRow]) -> None:
    lines = ["arm,seed,map,alignment_error,param_count,wall_time_s"]
    for r in rows:
        lines.append(
            ",".join(_fmt(v) for v in (r.arm, r.seed, r.mean_ap, r.alignment, r.param_count, r.wall_time_s))
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
