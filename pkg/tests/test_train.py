import dataclasses

import numpy as np
import pytest

from bevfuse.autodiff import Tensor
from bevfuse.dataset import generate_dataset
from bevfuse.model import ModelConfig, build_detector
from bevfuse.scene import GenConfig
from bevfuse.train import (
    ABLATION_ARMS,
    AblateConfig,
    SequenceError,
    TrainConfig,
    TrainError,
    ablate,
    evaluate_model,
    run_sequence,
    train,
    write_ablate_csv,
    write_eval_csv,
    write_train_csv,
)

GEN = GenConfig(h=12, w=12, channels=8, num_classes=2, frames=4, max_objects=2, noise_std=0.02)


def model_cfg(method="method_c", **kw):
    kw.setdefault("channels", GEN.channels)
    kw.setdefault("num_classes", GEN.num_classes)
    kw.setdefault("layers", 1)
    kw.setdefault("heads", 2)
    kw.setdefault("points", 2)
    return ModelConfig(method=method, **kw)


def train_cfg(method="method_c", **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("phase1_epochs", 1)
    return TrainConfig(model=model_cfg(method), **kw)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(GEN, 3, seed=17)


class TestRunSequence:
    def test_empty_rejected(self):
        _, det = build_detector(model_cfg(), seed=0)
        with pytest.raises(SequenceError):
            run_sequence(det, [])

    def test_out_of_order_rejected(self, scenes):
        _, det = build_detector(model_cfg(), seed=0)
        frames = scenes[0].frames
        with pytest.raises(SequenceError, match="out of order"):
            run_sequence(det, [frames[0], frames[2], frames[1]])

    def test_mixed_scenes_rejected(self, scenes):
        _, det = build_detector(model_cfg(), seed=0)
        with pytest.raises(SequenceError, match="mixed"):
            run_sequence(det, [scenes[0].frames[0], scenes[1].frames[1]])

    def test_first_frame_equals_zero_history(self, scenes):
        # the scene-start read must be indistinguishable from an explicit
        # zero history
        _, det = build_detector(model_cfg(), seed=1)
        bev = scenes[0].frames[0]
        steps = run_sequence(det, scenes[0].frames)
        f = det.backbone(bev.feat)
        h, h_hat = det.mbf(f, Tensor(np.zeros_like(f.data)))
        assert np.allclose(steps[0].output.h.data, h.data, atol=1e-12)
        assert np.allclose(steps[0].output.h_hat.data, h_hat.data, atol=1e-12)

    def test_causality_future_frames_irrelevant(self, scenes):
        _, det = build_detector(model_cfg(), seed=1)
        frames = scenes[0].frames
        base = run_sequence(det, frames)
        noisy_tail = [
            dataclasses.replace(b, feat=b.feat + 10.0) if i >= 2 else b
            for i, b in enumerate(frames)
        ]
        redo = run_sequence(det, noisy_tail)
        for t in range(2):
            assert np.array_equal(base[t].output.h.data, redo[t].output.h.data)
            assert base[t].detections == redo[t].detections
        assert not np.array_equal(base[2].output.h.data, redo[2].output.h.data)

    def test_decode_flag(self, scenes):
        _, det = build_detector(model_cfg(), seed=1)
        steps = run_sequence(det, scenes[0].frames, decode=False)
        assert all(s.detections is None and s.alignment is None for s in steps)

    def test_alignment_only_with_history_branch(self, scenes):
        _, det_a = build_detector(model_cfg("method_a"), seed=1)
        _, det_c = build_detector(model_cfg("method_c"), seed=1)
        steps_a = run_sequence(det_a, scenes[0].frames)
        steps_c = run_sequence(det_c, scenes[0].frames)
        assert all(s.alignment is None for s in steps_a)
        assert all(isinstance(s.alignment, float) for s in steps_c)


class TestTrainConfig:
    def test_lr_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(model=model_cfg(), lr=0.0)

    def test_phase1_within_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(model=model_cfg(), epochs=2, phase1_epochs=3)

    def test_dict_round_trip(self):
        cfg = train_cfg(epochs=4, phase1_epochs=2, lr=1e-3, seed=9)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert isinstance(back.betas, tuple)


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainError, match="empty"):
            train(train_cfg(), [])

    def test_window_longer_than_scene_rejected(self, scenes):
        cfg = TrainConfig(model=model_cfg("baseline_m", k_frames=5), epochs=1, phase1_epochs=0)
        with pytest.raises(TrainError, match="k_frames"):
            train(cfg, scenes)

    def test_zero_epochs_returns_initial_parameters(self, scenes):
        cfg = train_cfg(epochs=0, phase1_epochs=0, seed=23)
        store, _, report = train(cfg, scenes)
        fresh, _ = build_detector(cfg.model, cfg.seed)
        for name in store.names():
            assert np.array_equal(store[name].data, fresh[name].data)
        assert report.steps == []

    def test_same_seed_bit_identical(self, scenes):
        cfg = train_cfg(seed=5)
        s1, _, r1 = train(cfg, scenes)
        s2, _, r2 = train(cfg, scenes)
        for name in s1.names():
            assert np.array_equal(s1[name].data, s2[name].data)
        assert r1.steps == r2.steps

    def test_loss_descends(self):
        # ~200 optimizer steps on a handful of tiny scenes
        gen = dataclasses.replace(GEN, h=10, w=10, frames=3)
        scenes = generate_dataset(gen, 4, seed=3)
        cfg = TrainConfig(model=model_cfg("baseline_s"), epochs=50, phase1_epochs=1, seed=2)
        _, _, report = train(cfg, scenes)
        assert len(report.steps) == 200
        assert report.steps[-1].loss < report.steps[0].loss

    def test_phase1_leaves_fusion_parameters_untouched(self, scenes):
        cfg = train_cfg(epochs=1, phase1_epochs=1, seed=31)
        store, _, report = train(cfg, scenes)
        fresh, _ = build_detector(cfg.model, cfg.seed)
        assert all(s.phase == 1 for s in report.steps)
        for name in store.names():
            if name.startswith("mbf."):
                assert np.array_equal(store[name].data, fresh[name].data), name
        assert not np.array_equal(store["backbone.w"].data, fresh["backbone.w"].data)

    def test_phase2_trains_fusion(self, scenes):
        cfg = train_cfg(epochs=2, phase1_epochs=1, seed=31)
        store, _, report = train(cfg, scenes)
        fresh, _ = build_detector(cfg.model, cfg.seed)
        assert {s.phase for s in report.steps} == {1, 2}
        changed = [
            n for n in store.names()
            if n.startswith("mbf.") and not np.array_equal(store[n].data, fresh[n].data)
        ]
        assert changed

    def test_consistency_term_needs_history(self):
        # single-frame scenes never get past the scene-start skip
        gen = dataclasses.replace(GEN, frames=1)
        scenes = generate_dataset(gen, 2, seed=11)
        cfg = train_cfg(epochs=2, phase1_epochs=1, seed=1)
        _, _, report = train(cfg, scenes)
        assert all(s.cons == 0.0 for s in report.steps)

    def test_consistency_term_active_in_phase2(self, scenes):
        cfg = train_cfg(epochs=2, phase1_epochs=1, seed=1)
        _, _, report = train(cfg, scenes)
        assert all(s.cons == 0.0 for s in report.steps if s.phase == 1)
        assert any(s.cons > 0.0 for s in report.steps if s.phase == 2)

    def test_method_b_skips_consistency(self, scenes):
        cfg = TrainConfig(model=model_cfg("method_b"), epochs=2, phase1_epochs=1, seed=1)
        _, _, report = train(cfg, scenes)
        assert all(s.cons == 0.0 for s in report.steps)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_step(self, scenes):
        # input poisoning cannot reach the loss (relu gates NaN, the
        # heads saturate inf), so divergence is the real failure mode:
        # absurd lr * weight_decay oscillates the weights to overflow
        cfg = TrainConfig(
            model=model_cfg("baseline_s"), epochs=80, phase1_epochs=0,
            lr=100.0, weight_decay=100.0, seed=0,
        )
        with pytest.raises(TrainError, match=r"non-finite loss at step \d+"):
            train(cfg, scenes[:1])


class TestEvaluateModel:
    def test_report_fields(self, scenes):
        _, det = build_detector(model_cfg(), seed=2)
        ev = evaluate_model(det, scenes)
        assert 0.0 <= ev.detection.mean_ap <= 1.0
        assert np.isfinite(ev.alignment)

    def test_alignment_nan_for_single_frame_arm(self, scenes):
        _, det = build_detector(model_cfg("baseline_s"), seed=2)
        ev = evaluate_model(det, scenes)
        assert np.isnan(ev.alignment)

    def test_corruption_needs_gen_cfg(self, scenes):
        _, det = build_detector(model_cfg(), seed=2)
        with pytest.raises(ValueError):
            evaluate_model(det, scenes, corrupt_kind="occlusion")

    def test_corruption_changes_input(self, scenes):
        _, det = build_detector(model_cfg(), seed=2)
        clean = evaluate_model(det, scenes)
        occluded = evaluate_model(det, scenes, corrupt_kind="occlusion", gen_cfg=GEN)
        assert 0.0 <= occluded.detection.mean_ap <= 1.0
        assert occluded.alignment != clean.alignment


class TestCsv:
    def test_train_csv_byte_identical_runs(self, tmp_path, scenes):
        cfg = train_cfg(seed=7)
        _, _, r1 = train(cfg, scenes)
        _, _, r2 = train(cfg, scenes)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_train_csv(p1, r1)
        write_train_csv(p2, r2)
        assert p1.read_bytes() == p2.read_bytes()
        header = p1.read_text().splitlines()[0]
        assert header == "epoch,step,scene_id,phase,loss,cls,reg,cons"

    def test_eval_csv_structure(self, tmp_path, scenes):
        _, det = build_detector(model_cfg(), seed=2)
        ev = evaluate_model(det, scenes)
        path = tmp_path / "eval.csv"
        write_eval_csv(path, ev)
        lines = path.read_text().splitlines()
        assert lines[0] == "metric,class_id,threshold,value"
        assert any(line.startswith("mean_ap,") for line in lines)
        assert any(line.startswith("alignment_error,") for line in lines)


class TestAblate:
    def test_rows_and_csv(self, tmp_path):
        gen = dataclasses.replace(GEN, h=10, w=10, frames=3)
        cfg = AblateConfig(
            gen=gen,
            train=train_cfg(epochs=1, phase1_epochs=1),
            seeds=(0, 1),
            arms=("baseline_s", "method_a"),
            train_scenes=2,
            eval_scenes=1,
        )
        rows = ablate(cfg)
        assert [(r.arm, r.seed) for r in rows] == [
            ("baseline_s", 0), ("method_a", 0), ("baseline_s", 1), ("method_a", 1),
        ]
        assert all(r.param_count > 0 and r.wall_time_s >= 0 for r in rows)
        path = tmp_path / "ablate.csv"
        write_ablate_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "arm,seed,map,alignment_error,param_count,wall_time_s"
        assert len(lines) == 5

    def test_unknown_arm_rejected(self):
        with pytest.raises(ValueError, match="unknown ablation arms"):
            AblateConfig(gen=GEN, train=train_cfg(), arms=("method_z",))

    def test_all_arm_names_buildable(self):
        for arm, overrides in ABLATION_ARMS.items():
            cfg = dataclasses.replace(model_cfg(), **overrides)
            assert cfg.method in ("baseline_s", "baseline_m", "method_a", "method_b", "method_c")
