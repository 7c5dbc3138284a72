"""Optimization loop, freezing contract, and per-fold orchestration.

Defaults follow the experimental protocol: batch size 16, 20 epochs,
learning rate 0.001, Adam, no scheduler, no weight decay, no augmentation.
The model handed back per fold is the best-validation-accuracy checkpoint.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import PretrainedBundle, ViTConfig
from .data import Sample, FoldPlan, split_fold
from .errors import ConfigurationError, ContractError
from .layers import cross_entropy, softmax_probs
from .metrics import AggregateReport, MetricsReport, aggregate, compute
from .model import ModelConfig, StoneClassifier, TuningMode
from .optim import Adam, zero_grads
from .tensor import Tape, backward
from .util import substream, substream_seed


@dataclass(frozen=True)
class TrainConfig:
    mode: TuningMode = TuningMode.SEGPROMPT
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 0.001
    optimizer: str = "adam"
    seed: int = 0
    l_s: int = 16
    l_e: int = 2
    vpt_tokens: int = 8
    no_indicator: bool = False
    no_extra_tokens: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigurationError("batch size, epochs and learning rate must be positive")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unknown optimizer '{self.optimizer}'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self.mode, l_s=self.l_s, l_e=self.l_e, vpt_tokens=self.vpt_tokens,
            no_indicator=self.no_indicator, no_extra_tokens=self.no_extra_tokens,
        )


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_val: list[MetricsReport] = field(default_factory=list)
    best_epoch: int = 0
    trainable_count: int = 0
    frozen_count: int = 0
    steps_per_epoch: int = 0
    total_steps: int = 0
    wall_time: float = 0.0  # in-memory only; never serialized

    @property
    def best_val(self) -> MetricsReport:
        return self.epoch_val[self.best_epoch]

    def to_csv(self) -> str:
        lines = ["epoch,loss,val_accuracy,val_precision,val_recall,val_f1,val_auc"]
        for i, (loss, rep) in enumerate(zip(self.epoch_losses, self.epoch_val), start=1):
            lines.append(
                f"{i},{loss:.10f},{rep.accuracy:.10f},{rep.precision:.10f},"
                f"{rep.recall:.10f},{rep.f1:.10f},{rep.auc:.10f}"
            )
        lines.append(f"# best_epoch={self.best_epoch + 1}")
        lines.append(f"# trainable_params={self.trainable_count}")
        lines.append(f"# frozen_params={self.frozen_count}")
        lines.append(f"# steps_per_epoch={self.steps_per_epoch}")
        lines.append(f"# total_steps={self.total_steps}")
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate(model: StoneClassifier, samples: list[Sample],
             batch_size: int = 16) -> MetricsReport:
    """Inference-mode metrics (no tape recorded, model untouched)."""
    images = np.stack([s.image for s in samples])
    masks = [s.mask for s in samples]
    labels = np.array([s.label for s in samples])
    needs_mask = model.cfg.mode.uses_mask
    preds, scores = [], []
    for sel in _batches(len(samples), batch_size):
        mb = [masks[i] for i in sel] if needs_mask else None
        logits = model.forward(images[sel], mb)
        probs = softmax_probs(logits)
        preds.extend(probs.argmax(axis=1).tolist())
        scores.extend(probs[:, 1].tolist())
    return compute(preds, scores, labels)


def build_model(cfg: TrainConfig, bundle: PretrainedBundle | None,
                vit_cfg: ViTConfig | None = None, seed: int | None = None) -> StoneClassifier:
    """Fresh model for one fold. ViT modes need the pretrained bundle; the
    ResNet baselines only borrow its stem weights when present."""
    mode = cfg.mode
    seed = cfg.seed if seed is None else seed
    if mode.is_resnet:
        vcfg = vit_cfg or (bundle.vit_cfg if bundle else ViTConfig())
        stem_state = bundle.stem_state if bundle else None
        return StoneClassifier(cfg.model_config(), vcfg, seed, stem_state=stem_state)
    if bundle is None:
        raise ConfigurationError(
            f"mode '{mode.value}' needs a pretrained backbone checkpoint"
        )
    return StoneClassifier(cfg.model_config(), bundle.vit_cfg, seed,
                           backbone=bundle.build_backbone(),
                           stem_state=bundle.stem_state)


def train_fold(cfg: TrainConfig, train_samples: list[Sample], val_samples: list[Sample],
               bundle: PretrainedBundle | None) -> tuple[StoneClassifier, TrainReport]:
    """Train one fold and return the best-validation-accuracy model."""
    train_vids = {s.video_id for s in train_samples}
    val_vids = {s.video_id for s in val_samples}
    overlap = train_vids & val_vids
    if overlap:
        raise ContractError(f"train/validation share videos {sorted(overlap)}")
    if not train_samples or not val_samples:
        raise ConfigurationError("train and validation sets must both be non-empty")

    start = time.perf_counter()
    model = build_model(cfg, bundle)
    trainables = model.trainable_parameters()
    opt = Adam(lr=cfg.learning_rate)
    rng = substream(cfg.seed, "shuffle")

    images = np.stack([s.image for s in train_samples])
    masks = [s.mask for s in train_samples]
    labels = np.array([s.label for s in train_samples])
    needs_mask = cfg.mode.uses_mask
    if needs_mask and any(m is None for m in masks):
        raise ConfigurationError(
            f"mode '{cfg.mode.value}' requires segmentation masks but the dataset has none"
        )

    report = TrainReport()
    report.trainable_count, report.frozen_count = model.parameter_counts()
    report.steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    report.total_steps = report.steps_per_epoch * cfg.epochs

    best_acc = -1.0
    best_state: dict[str, np.ndarray] | None = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for step_idx, sel in enumerate(_batches(len(train_samples), cfg.batch_size, order)):
            mb = [masks[i] for i in sel] if needs_mask else None
            zero_grads(trainables)
            with Tape():
                logits = model.forward(images[sel], mb)
                loss = cross_entropy(logits, labels[sel])
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise ContractError(
                        f"non-finite loss at epoch {epoch + 1} step {step_idx + 1} "
                        f"(mode {cfg.mode.value}, lr {cfg.learning_rate})"
                    )
                backward(loss)
            opt.step(trainables)
            losses.append(loss_val)
        report.epoch_losses.append(float(np.mean(losses)))
        val_report = evaluate(model, val_samples, cfg.batch_size)
        report.epoch_val.append(val_report)
        if val_report.accuracy > best_acc:
            best_acc = val_report.accuracy
            report.best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in trainables}

    if best_state is not None:
        for name, t in trainables:
            t.data = best_state[name]
    report.wall_time = time.perf_counter() - start
    return model, report


@dataclass
class CVResult:
    fold_reports: list[tuple[int, MetricsReport]]
    aggregate: AggregateReport
    train_reports: list[TrainReport]
    models: list[StoneClassifier]


def _fold_task(args) -> tuple[int, StoneClassifier, TrainReport]:
    fold_id, cfg, train_samples, val_samples, bundle = args
    model, report = train_fold(cfg, train_samples, val_samples, bundle)
    return fold_id, model, report


def run_cross_validation(cfg: TrainConfig, samples: list[Sample], fold_plan: FoldPlan,
                         bundle: PretrainedBundle | None, jobs: int = 1) -> CVResult:
    """Train a fresh model per fold from the same checkpoint and aggregate
    the best-epoch validation metrics as mean and std across folds."""
    tasks = []
    for fold_id, fold in enumerate(fold_plan.folds):
        train_samples, val_samples = split_fold(samples, fold)
        fold_cfg = _with_seed(cfg, substream_seed(cfg.seed, f"fold:{fold_id}"))
        tasks.append((fold_id, fold_cfg, train_samples, val_samples, bundle))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    fold_reports = [(fid, rep.best_val) for fid, _, rep in results]
    return CVResult(
        fold_reports=fold_reports,
        aggregate=aggregate([rep for _, rep in fold_reports]),
        train_reports=[rep for _, _, rep in results],
        models=[m for _, m, _ in results],
    )


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        mode=cfg.mode, batch_size=cfg.batch_size, epochs=cfg.epochs,
        learning_rate=cfg.learning_rate, optimizer=cfg.optimizer, seed=seed,
        l_s=cfg.l_s, l_e=cfg.l_e, vpt_tokens=cfg.vpt_tokens,
        no_indicator=cfg.no_indicator, no_extra_tokens=cfg.no_extra_tokens,
    )
