from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from conftest import make_toy_config
from portraitqa import engine
from portraitqa.config import BranchFlags, TrainConfig
from portraitqa.dataset import SceneIndex, load_manifest, sample_pairs, split_records
from portraitqa.errors import (
    EpochOutOfRange,
    HashMismatch,
    NoQualifyingScene,
    VersionMismatch,
)
from portraitqa.engine import (
    PipelineContext,
    Trainer,
    build_model,
    build_pair_batch,
    evaluate,
    fit,
    load_checkpoint,
    lr_schedule,
    model_score_fn,
    save_checkpoint,
)


class TestLrSchedule:
    def test_paper_schedule(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 1e-5
        assert lr_schedule(1, cfg) == 1e-5
        assert lr_schedule(2, cfg) == pytest.approx(1e-6)
        assert lr_schedule(9, cfg) == pytest.approx(1e-6)

    def test_out_of_range(self):
        cfg = TrainConfig()
        with pytest.raises(EpochOutOfRange):
            lr_schedule(-1, cfg)
        with pytest.raises(EpochOutOfRange):
            lr_schedule(10, cfg)


class TestModelAssembly:
    def test_input_dims_per_branch_config(self, toy_dataset, tmp_path):
        _, manifest = toy_dataset
        combos = [
            (dict(use_full=True, use_facial=False, use_liqe=False), 16),
            (dict(use_full=False, use_facial=True, use_liqe=False), 16),
            (dict(use_full=True, use_facial=True, use_liqe=False), 32),
            (dict(use_full=True, use_facial=True, use_liqe=True), 32 + 495),
        ]
        for flags, expected in combos:
            cfg = make_toy_config(manifest, tmp_path / "r",
                                  branches=BranchFlags(**flags))
            assert build_model(cfg).input_dim == expected

    def test_same_seed_same_init(self, toy_config):
        a = build_model(toy_config)
        b = build_model(toy_config)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


def toy_batch(cfg, n_pairs=None, epoch=0):
    records = split_records(load_manifest(cfg.manifest, cfg.attribute), "train")
    index = SceneIndex.build(records)
    pairs = sample_pairs(index, records, n_pairs=n_pairs or len(records), seed=cfg.seed)
    ctx = PipelineContext(cfg=cfg)
    return build_pair_batch(pairs, ctx, epoch=epoch, batch_index=0), pairs, ctx


class TestTrainStep:
    def test_step_returns_finite_loss(self, toy_config):
        batch, _, _ = toy_batch(toy_config, n_pairs=4)
        trainer = Trainer(toy_config, build_model(toy_config))
        loss = trainer.step(batch)
        assert math.isfinite(loss)
        assert 0.0 <= loss <= 1.0

    def test_equal_images_label_one_loss(self, toy_config):
        """A pair of identical inputs scores identically: loss is 1 - sqrt(0.5)."""
        batch, pairs, _ = toy_batch(toy_config, n_pairs=1)
        model = build_model(toy_config).double()
        batch_x = {k: v.double() for k, v in batch["x"].items()}
        same = {"x": batch_x, "y": batch_x, "labels": torch.tensor([1])}
        model.eval()
        with torch.no_grad():
            sx = model(same["x"])
            loss = engine.FidelityRankingLoss()(sx, sx, same["labels"])
        assert float(loss) == pytest.approx(1 - math.sqrt(0.5), abs=1e-12)

    def test_swap_and_flip_leaves_loss_unchanged(self, toy_config):
        batch, _, _ = toy_batch(toy_config, n_pairs=5)
        model = build_model(toy_config)
        model.eval()
        with torch.no_grad():
            sx, sy = model(batch["x"]), model(batch["y"])
            loss_fn = engine.FidelityRankingLoss()
            fwd = loss_fn(sx, sy, batch["labels"])
            flipped = loss_fn(sy, sx, 1 - batch["labels"])
        assert float(fwd) == pytest.approx(float(flipped), abs=1e-9)

    def test_deterministic_batches(self, toy_config):
        a, _, _ = toy_batch(toy_config, n_pairs=3)
        b, _, _ = toy_batch(toy_config, n_pairs=3)
        for side in ("x", "y"):
            for key in a[side]:
                assert torch.equal(a[side][key], b[side][key])

    def test_non_finite_loss_aborts_with_diagnostics(self, toy_config):
        from portraitqa.errors import NonFiniteLoss

        batch, _, _ = toy_batch(toy_config, n_pairs=2)
        model = build_model(toy_config)
        with torch.no_grad():
            model.head.fc2.weight.fill_(float("inf"))
        with pytest.raises(NonFiniteLoss):
            Trainer(toy_config, model).step(batch)


class TestOverfit:
    def test_toy_pairs_reach_full_accuracy(self, toy_dataset, tmp_path):
        """Separable synthetic pairs are fit to 100% order accuracy quickly."""
        _, manifest = toy_dataset
        cfg = make_toy_config(
            manifest, tmp_path / "overfit",
            branches=BranchFlags(use_full=True, use_facial=True, use_liqe=False))
        batch, pairs, _ = toy_batch(cfg, n_pairs=20)
        model = build_model(cfg)
        trainer = Trainer(cfg, model)
        trainer.set_lr(3e-3)

        def accuracy():
            model.eval()
            with torch.no_grad():
                sx, sy = model(batch["x"]), model(batch["y"])
                p_hat = 0.5 * torch.erfc((sy - sx) / 2.0)
            correct = (p_hat > 0.5) == (batch["labels"] > 0.5)
            return float(correct.float().mean())

        losses = [trainer.step(batch) for _ in range(150)]
        assert accuracy() == 1.0
        assert min(losses) < 0.05
        assert losses[-1] < losses[0]


class TestEvaluate:
    def test_oracle_scores_give_perfect_metrics(self, toy_dataset):
        _, manifest = toy_dataset
        records = split_records(load_manifest(manifest, "overall"), "val")
        report = evaluate(records, lambda r: r.jod)
        assert report.averaged["srcc"] == pytest.approx(1.0, abs=1e-12)
        assert report.averaged["plcc"] == pytest.approx(1.0, abs=1e-6)
        assert report.averaged["mae"] == pytest.approx(0.0, abs=1e-6)

    def test_constant_model_has_no_qualifying_scene(self, toy_dataset):
        _, manifest = toy_dataset
        records = split_records(load_manifest(manifest, "overall"), "val")
        with pytest.raises(NoQualifyingScene):
            evaluate(records, lambda r: 0.5)

    def test_evaluation_is_repeatable(self, toy_config):
        records = split_records(
            load_manifest(toy_config.manifest, "overall"), "val")
        model = build_model(toy_config)
        ctx = PipelineContext(cfg=toy_config)
        fn = model_score_fn(model, ctx)
        a = evaluate(records, fn)
        b = evaluate(records, fn)
        assert a.to_dict() == b.to_dict()

    def test_three_scene_report_structure(self, toy_dataset):
        _, manifest = toy_dataset
        records = split_records(load_manifest(manifest, "overall"), "val")
        report = evaluate(records, lambda r: r.jod * 2 + 1)
        assert report.n_scenes_used == 3
        for key in ("srcc", "plcc", "krcc", "mae"):
            per = [m.to_dict()[key] for m in report.per_scene.values()]
            assert report.averaged[key] == pytest.approx(float(np.mean(per)), abs=1e-15)


class TestCheckpoints:
    def test_round_trip_preserves_parameters_and_eval(self, toy_config, tmp_path):
        model = build_model(toy_config)
        trainer = Trainer(toy_config, model)
        batch, _, ctx = toy_batch(toy_config, n_pairs=3)
        trainer.step(batch)

        records = split_records(load_manifest(toy_config.manifest, "overall"), "val")
        before = evaluate(records, model_score_fn(model, ctx)).to_dict()

        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, trainer.optimizer, toy_config, epoch=0,
                        metric_history=[], grid=ctx.grid)
        bundle = load_checkpoint(path)
        for pa, pb in zip(model.parameters(), bundle.model.parameters()):
            assert torch.equal(pa, pb)
        after = evaluate(
            records, model_score_fn(bundle.model, PipelineContext(cfg=bundle.cfg)),
        ).to_dict()
        assert before == after

    def test_grid_hash_guard(self, toy_config, tmp_path):
        model = build_model(toy_config)
        trainer = Trainer(toy_config, model)
        ctx = PipelineContext(cfg=toy_config)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, trainer.optimizer, toy_config, 0, [], ctx.grid)
        payload = torch.load(path, weights_only=True)
        payload["grid_hash"] = "tampered"
        torch.save(payload, path)
        with pytest.raises(HashMismatch):
            load_checkpoint(path)

    def test_version_guard(self, toy_config, tmp_path):
        model = build_model(toy_config)
        trainer = Trainer(toy_config, model)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, trainer.optimizer, toy_config, 0, [],
                        PipelineContext(cfg=toy_config).grid)
        payload = torch.load(path, weights_only=True)
        payload["version"] = 999
        torch.save(payload, path)
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_provenance_recorded(self, toy_config):
        model = build_model(toy_config)
        assert model.provenance == {"full": "random", "facial": "random"}

    def test_external_weights_provenance_reaches_checkpoint(self, toy_dataset,
                                                            tmp_path):
        from dataclasses import replace

        from portraitqa.backbone import build_backbone, save_weights, write_weights

        donor = build_backbone("toy", feature_dim=16, seed=77)
        manifest, blob = save_weights(donor, branch="facial",
                                      source="face-IQA-pretrained")
        weights_path = tmp_path / "facial.weights"
        write_weights(weights_path, manifest, blob)

        _, data_manifest = toy_dataset
        cfg = make_toy_config(data_manifest, tmp_path / "run")
        cfg.backbone = replace(cfg.backbone, facial_weights=str(weights_path))
        model = build_model(cfg)
        assert model.provenance["facial"] == "face-IQA-pretrained"
        for pa, pb in zip(model.facial_backbone.parameters(), donor.parameters()):
            assert torch.equal(pa, pb)

        trainer = Trainer(cfg, model)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, trainer.optimizer, cfg, 0, [],
                        PipelineContext(cfg=cfg).grid)
        assert load_checkpoint(path).provenance["facial"] == "face-IQA-pretrained"


class TestFit:
    def test_writes_run_artifacts(self, toy_dataset, tmp_path):
        _, manifest = toy_dataset
        cfg = make_toy_config(manifest, tmp_path / "run", epochs=2)
        run_dir = fit(cfg)
        assert (run_dir / "config.yaml").is_file()
        assert (run_dir / "prompts.txt").is_file()
        assert (run_dir / "checkpoints" / "last.pt").is_file()
        assert (run_dir / "checkpoints" / "best.pt").is_file()
        assert (run_dir / "epoch_000_metrics.json").is_file()
        assert (run_dir / "epoch_001_metrics.json").is_file()
        history = json.loads((run_dir / "metric_history.json").read_text())
        assert len(history["epochs"]) == 2
        log_lines = (run_dir / "train_log.jsonl").read_text().splitlines()
        steps = [json.loads(l) for l in log_lines]
        assert all(set(s) == {"step", "epoch", "lr", "loss"} for s in steps)

    def test_identical_seeds_identical_histories(self, toy_dataset, tmp_path):
        _, manifest = toy_dataset
        cfg_a = make_toy_config(manifest, tmp_path / "a", epochs=2)
        cfg_b = make_toy_config(manifest, tmp_path / "b", epochs=2)
        run_a, run_b = fit(cfg_a), fit(cfg_b)
        hist_a = json.loads((run_a / "metric_history.json").read_text())
        hist_b = json.loads((run_b / "metric_history.json").read_text())
        assert hist_a == hist_b
        assert ((run_a / "train_log.jsonl").read_text()
                == (run_b / "train_log.jsonl").read_text())

    def test_resume_matches_continuous_run(self, toy_dataset, tmp_path):
        _, manifest = toy_dataset
        full_cfg = make_toy_config(manifest, tmp_path / "full", epochs=4)
        full_run = fit(full_cfg)
        full_hist = json.loads((full_run / "metric_history.json").read_text())

        short_cfg = make_toy_config(manifest, tmp_path / "short", epochs=2)
        short_run = fit(short_cfg)
        resumed_cfg = make_toy_config(manifest, tmp_path / "resumed", epochs=4)
        resumed_run = fit(resumed_cfg,
                          resume_from=short_run / "checkpoints" / "last.pt")
        resumed_hist = json.loads((resumed_run / "metric_history.json").read_text())
        assert resumed_hist["epochs"] == full_hist["epochs"]

    def test_resume_applies_decayed_lr(self, toy_dataset, tmp_path):
        _, manifest = toy_dataset
        cfg = make_toy_config(manifest, tmp_path / "decay", epochs=3,
                              lr_decay_after_epochs=2)
        run = fit(cfg)
        resumed = make_toy_config(manifest, tmp_path / "decay2", epochs=4,
                                  lr_decay_after_epochs=2)
        run2 = fit(resumed, resume_from=run / "checkpoints" / "last.pt")
        hist = json.loads((run2 / "metric_history.json").read_text())
        assert hist["epochs"][3]["lr"] == pytest.approx(cfg.lr_initial / 10)
