"""Training loop, evaluation protocol, and checkpointing.

Training samples within-scene image pairs, forwards both members through
the configured branches, and minimizes the batch-mean fidelity loss with
Adam. All pipeline randomness (pair sampling, crop windows) derives
statelessly from (seed, epoch, index), so a run can be resumed from a
checkpoint bit-compatibly without serializing RNG streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import build_backbone, read_weights, load_weights
from .config import TrainConfig, config_from_dict, config_to_dict, save_config
from .dataset import (
    PairSample,
    PortraitRecord,
    SceneIndex,
    load_manifest,
    sample_pairs,
    split_records,
)
from .errors import (
    EpochOutOfRange,
    HashMismatch,
    NonFiniteLoss,
    NoValidScene,
    VersionMismatch,
)
from .head import HeadConfig, build_head, fuse
from .metrics import MetricReport, evaluate_grouped
from .preprocess import (
    FaceDetector,
    NullFaceDetector,
    PreprocessConfig,
    extract_face,
    load_image,
    preprocess_image,
    resize_min_side,
)
from .prompts import PromptGrid, build_grid, compute_prompt_features, export_prompts
from .prompts import ClipEmbeddingProvider, HashEmbeddingProvider
from .ranking import FidelityRankingLoss
from .seeding import derive_seed, seed_everything

CHECKPOINT_VERSION = 1
PROMPT_DIM = 495


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Initial learning rate, divided by the decay factor after the decay epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.lr_decay_after_epochs:
        return cfg.lr_initial
    return cfg.lr_initial / cfg.lr_decay_factor


def _preprocess_config(cfg: TrainConfig) -> PreprocessConfig:
    return PreprocessConfig(
        resize_min_dim=cfg.preprocess.resize_min_dim,
        crop_size=cfg.preprocess.crop_size,
        mean=cfg.preprocess.mean,
        std=cfg.preprocess.std,
    )


class PortraitQualityModel(nn.Module):
    """Configured branches plus the fusion head, scoring image batches."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.use_full = cfg.branches.use_full
        self.use_facial = cfg.branches.use_facial
        self.use_liqe = cfg.branches.use_liqe
        self.provenance: dict[str, str] = {}
        input_dim = 0
        if self.use_full:
            self.full_backbone = build_backbone(
                cfg.backbone.name, cfg.backbone.feature_dim,
                derive_seed(cfg.seed, "backbone", "full"))
            input_dim += self.full_backbone.feature_dim
            self.provenance["full"] = cfg.backbone.full_source
        if self.use_facial:
            self.facial_backbone = build_backbone(
                cfg.backbone.name, cfg.backbone.feature_dim,
                derive_seed(cfg.seed, "backbone", "facial"))
            input_dim += self.facial_backbone.feature_dim
            self.provenance["facial"] = cfg.backbone.facial_source
        if self.use_liqe:
            input_dim += PROMPT_DIM
        self.head = build_head(
            HeadConfig(input_dim=input_dim, hidden_dim=cfg.head.hidden_dim),
            derive_seed(cfg.seed, "head"))

    @property
    def input_dim(self) -> int:
        return self.head.config.input_dim

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        f_full = self.full_backbone(inputs["full"]) if self.use_full else None
        f_facial = self.facial_backbone(inputs["facial"]) if self.use_facial else None
        f_prompt = inputs["prompt"] if self.use_liqe else None
        bundle = fuse(f_full=f_full, f_facial=f_facial, f_prompt=f_prompt)
        return self.head(bundle.concat)


def build_model(cfg: TrainConfig) -> PortraitQualityModel:
    """Construct the model and install any externally pre-trained weights."""
    model = PortraitQualityModel(cfg)
    if cfg.branches.use_full and cfg.backbone.full_weights:
        manifest, blob = read_weights(cfg.backbone.full_weights)
        load_weights(model.full_backbone, manifest, blob)
        model.provenance["full"] = manifest.source
    if cfg.branches.use_facial and cfg.backbone.facial_weights:
        manifest, blob = read_weights(cfg.backbone.facial_weights)
        load_weights(model.facial_backbone, manifest, blob)
        model.provenance["facial"] = manifest.source
    return model


def build_provider(cfg: TrainConfig):
    if not cfg.branches.use_liqe:
        return None
    p = cfg.prompt_provider
    if p.name == "stub":
        return HashEmbeddingProvider(dim=p.embed_dim, logit_scale=p.logit_scale)
    return ClipEmbeddingProvider(p.model_id)


@dataclass
class PipelineContext:
    """Everything needed to turn a record into model input tensors."""

    cfg: TrainConfig
    grid: PromptGrid | None = None
    provider: object | None = None
    detector: FaceDetector | None = None
    prompt_cache: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.detector is None:
            self.detector = NullFaceDetector()
        if self.cfg.branches.use_liqe:
            if self.grid is None:
                self.grid = build_grid()
            if self.provider is None:
                self.provider = build_provider(self.cfg)
            if self.prompt_cache is None:
                self.prompt_cache = {}


def prepare_record_inputs(
    record: PortraitRecord,
    ctx: PipelineContext,
    crop_mode: str,
    seed: int = 0,
) -> dict[str, torch.Tensor]:
    cfg = ctx.cfg
    pp = _preprocess_config(cfg)
    image = load_image(record.image_ref)
    out: dict[str, torch.Tensor] = {}
    if cfg.branches.use_full:
        out["full"] = preprocess_image(image, pp, crop_mode, derive_seed(seed, "full"))
    if cfg.branches.use_facial:
        face = extract_face(record, image, ctx.detector)
        out["facial"] = preprocess_image(
            face.image, pp, crop_mode, derive_seed(seed, "facial"))
    if cfg.branches.use_liqe:
        key = str(record.image_ref)
        probs = ctx.prompt_cache.get(key)
        if probs is None:
            # Prompt features are computed on the resized full image (pre
            # crop), so they are stable across crop draws and cacheable.
            resized = resize_min_side(image, pp.resize_min_dim)
            probs = compute_prompt_features(resized, ctx.grid, ctx.provider).probs
            ctx.prompt_cache[key] = probs
        out["prompt"] = torch.from_numpy(probs).to(torch.float32)
    return out


def build_pair_batch(
    pairs: Sequence[PairSample],
    ctx: PipelineContext,
    epoch: int,
    batch_index: int,
) -> dict:
    """Collate a list of pairs into stacked tensors for one training step."""
    sides: dict[str, dict[str, list[torch.Tensor]]] = {"x": {}, "y": {}}
    labels = []
    for j, pair in enumerate(pairs):
        for side, record in (("x", pair.x), ("y", pair.y)):
            seed = derive_seed(ctx.cfg.seed, "crop", epoch, batch_index, j, side)
            inputs = prepare_record_inputs(record, ctx, "random", seed)
            for k, v in inputs.items():
                sides[side].setdefault(k, []).append(v)
        labels.append(pair.label)
    return {
        "x": {k: torch.stack(v) for k, v in sides["x"].items()},
        "y": {k: torch.stack(v) for k, v in sides["y"].items()},
        "labels": torch.tensor(labels, dtype=torch.float32),
    }


class Trainer:
    """Holds the model, optimizer, and loss; applies one step per batch."""

    def __init__(self, cfg: TrainConfig, model: PortraitQualityModel):
        self.cfg = cfg
        self.model = model
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)
        self.loss_fn = FidelityRankingLoss()

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def step(self, batch: dict) -> float:
        self.model.train()
        self.optimizer.zero_grad()
        scores_x = self.model(batch["x"])
        scores_y = self.model(batch["y"])
        loss = self.loss_fn(scores_x, scores_y, batch["labels"])
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"loss is {loss.item()!r}; score ranges "
                f"x=[{scores_x.min().item()}, {scores_x.max().item()}] "
                f"y=[{scores_y.min().item()}, {scores_y.max().item()}]")
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())


def model_score_fn(
    model: PortraitQualityModel, ctx: PipelineContext
) -> Callable[[PortraitRecord], float]:
    """Single-record scorer: center crop, eval mode, no grad."""

    def score(record: PortraitRecord) -> float:
        model.eval()
        inputs = prepare_record_inputs(record, ctx, "center")
        batch = {k: v.unsqueeze(0) for k, v in inputs.items()}
        with torch.no_grad():
            return float(model(batch)[0])

    return score


def evaluate(
    records: Iterable[PortraitRecord],
    score_fn: Callable[[PortraitRecord], float],
    attribute: str = "overall",
    min_scene_size: int = 2,
) -> MetricReport:
    """Score every record, then run the grouped per-scene metric protocol."""
    scored = [(r.scene_id, score_fn(r), r.jod) for r in records]
    return evaluate_grouped(scored, attribute=attribute, min_scene_size=min_scene_size)


def evaluate_scored(
    scored: Sequence[tuple[PortraitRecord, float]], cfg: TrainConfig
) -> MetricReport:
    """Grouped metrics over already-scored records."""
    triples = [(r.scene_id, pred, r.jod) for r, pred in scored]
    return evaluate_grouped(
        triples, attribute=cfg.attribute, min_scene_size=cfg.min_scene_size)


# --- checkpointing ------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: PortraitQualityModel,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    epoch: int,
    metric_history: list,
    grid: PromptGrid | None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "metric_history": metric_history,
        "grid_hash": grid.hash() if grid is not None else None,
        "provenance": dict(model.provenance),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


@dataclass
class CheckpointBundle:
    cfg: TrainConfig
    model: PortraitQualityModel
    optimizer_state: dict
    epoch: int
    metric_history: list
    provenance: dict


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    cfg = config_from_dict(payload["config"])
    if cfg.branches.use_liqe:
        current = build_grid().hash()
        if payload["grid_hash"] != current:
            raise HashMismatch(
                "prompt grid hash changed between save and load; feature "
                "positions would be inconsistent")
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.provenance = dict(payload.get("provenance", {}))
    return CheckpointBundle(
        cfg=cfg,
        model=model,
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        metric_history=payload["metric_history"],
        provenance=dict(payload.get("provenance", {})),
    )


# --- the training loop --------------------------------------------------------

def _chunks(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def fit(
    cfg: TrainConfig,
    resume_from: str | Path | None = None,
    detector: FaceDetector | None = None,
) -> Path:
    """Train per the configured schedule; returns the run directory.

    One epoch samples as many pairs as there are training records. After
    every epoch the validation split is scored with center crops and the
    grouped metrics are appended to the history; the checkpoint with the
    best validation SRCC is kept alongside the last one.
    """
    cfg.validate()
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed, cfg.deterministic)

    records = load_manifest(cfg.manifest, cfg.attribute)
    train_records = split_records(records, "train")
    val_records = split_records(records, "val")
    if not train_records:
        raise NoValidScene("manifest has no training records for this attribute")
    index = SceneIndex.build(train_records)

    grid = build_grid() if cfg.branches.use_liqe else None
    ctx = PipelineContext(cfg=cfg, grid=grid, detector=detector)

    start_epoch = 0
    metric_history: list[dict] = []
    model = build_model(cfg)
    trainer = Trainer(cfg, model)
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model.load_state_dict(bundle.model.state_dict())
        trainer.optimizer.load_state_dict(bundle.optimizer_state)
        start_epoch = bundle.epoch + 1
        metric_history = list(bundle.metric_history)

    save_config(cfg, run_dir / "config.yaml")
    if grid is not None:
        export_prompts(grid, run_dir / "prompts.txt")

    ckpt_dir = run_dir / "checkpoints"
    best_srcc = max(
        (h["val"]["srcc"] for h in metric_history), default=float("-inf"))
    global_step = sum(h["steps"] for h in metric_history)

    with (run_dir / "train_log.jsonl").open("a", encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            trainer.set_lr(lr)
            pairs = sample_pairs(
                index, train_records, n_pairs=len(train_records),
                seed=derive_seed(cfg.seed, "pairs", epoch))
            losses = []
            for b, chunk in enumerate(_chunks(pairs, cfg.batch_size)):
                batch = build_pair_batch(chunk, ctx, epoch, b)
                loss = trainer.step(batch)
                losses.append(loss)
                global_step += 1
                log.write(json.dumps({
                    "step": global_step, "epoch": epoch, "lr": lr, "loss": loss,
                }) + "\n")

            report = evaluate(
                val_records, model_score_fn(model, ctx),
                attribute=cfg.attribute, min_scene_size=cfg.min_scene_size)
            report_path = run_dir / f"epoch_{epoch:03d}_metrics.json"
            report_path.write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True),
                encoding="utf-8")
            metric_history.append({
                "epoch": epoch,
                "lr": lr,
                "steps": len(losses),
                "train_loss_mean": float(np.mean(losses)),
                "val": dict(report.averaged),
            })
            save_checkpoint(ckpt_dir / "last.pt", model, trainer.optimizer,
                            cfg, epoch, metric_history, grid)
            if report.averaged["srcc"] > best_srcc:
                best_srcc = report.averaged["srcc"]
                save_checkpoint(ckpt_dir / "best.pt", model, trainer.optimizer,
                                cfg, epoch, metric_history, grid)

    (run_dir / "metric_history.json").write_text(
        json.dumps({"best_val_srcc": best_srcc, "epochs": metric_history},
                   indent=2, sort_keys=True),
        encoding="utf-8")
    return run_dir
