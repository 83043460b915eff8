"""Training, evaluation, prediction and checkpoints."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from ..backbone import ConfigError, ParamPartition, freeze_partition, frozen_digest
from ..decoders import finalize_mask
from ..metrics import MetricsReport, aggregate, evaluate_pair
from ..model import SaliencyModel
from ..objective import batch_loss
from .config import RunConfig
from .data import (
    Batch,
    DatasetIndex,
    PromptBank,
    Sample,
    collate,
    iterate_batches,
    load_dataset,
    read_image,
    resize_image,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def make_optimizer(model: SaliencyModel, partition: ParamPartition, cfg: RunConfig) -> torch.optim.Optimizer:
    params = [p for n, p in model.named_parameters() if n in partition.trainable_ids]
    if not params:
        raise ConfigError("no trainable parameters: nothing to optimize")
    opt_cls = torch.optim.AdamW if cfg.optimizer.kind == "adamw" else torch.optim.Adam
    return opt_cls(params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)


def forward_batch(model: SaliencyModel, batch: Batch) -> torch.Tensor:
    """Probabilities at mask resolution for a collated batch."""
    logits = model(batch.images, batch.prompts, batch.text, batch.text_mask)
    return finalize_mask(logits, batch.masks.shape[-2:])


def _check_optimizer(model, optimizer, partition):
    names = {id(p): n for n, p in model.named_parameters()}
    held = {names[id(p)] for g in optimizer.param_groups for p in g["params"]}
    if held != partition.trainable_ids:
        raise TrainingError(f"optimizer holds {len(held)} params, trainable set has {len(partition.trainable_ids)}")
    for n, p in model.named_parameters():
        if n in partition.frozen_ids and p.grad is not None:
            raise TrainingError(f"frozen parameter {n} received a gradient")


@dataclass
class TrainResult:
    model: SaliencyModel
    partition: ParamPartition
    optimizer: torch.optim.Optimizer
    losses: list[tuple[float, float, float]]
    checkpoint: Optional[Path]
    log_path: Optional[Path]
    frozen_before: str
    frozen_after: str


def train(cfg: RunConfig, samples: Optional[list[Sample]] = None, write: bool = True) -> TrainResult:
    """Optimize the side modules and decoder on ``cfg.paths.train_data``.

    ``samples`` may be passed to skip dataset loading; ``write=False`` keeps
    everything in memory (no config echo, log or checkpoint).
    """
    cfg.validate()
    if samples is None:
        if not cfg.paths.train_data:
            raise ConfigError("paths.train_data is required for training")
        index = DatasetIndex.from_root(cfg.paths.train_data, cfg.backbone.input_resolution)
        samples = load_dataset(index, cfg.prompts, cfg.skip_bad_files)
    if not samples:
        raise ConfigError("training set is empty")

    model = SaliencyModel(cfg.model_config())
    partition = freeze_partition(model)
    optimizer = make_optimizer(model, partition, cfg)
    digest_before = frozen_digest(model, partition)

    out_dir = Path(cfg.paths.out_dir)
    log_path = ckpt_path = None
    writer = fh = None
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write(out_dir / "config.json")
        log_path = out_dir / "train_log.csv"
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "bce", "iou", "total"])

    losses = []
    model.train()
    batches = iterate_batches(samples, cfg.batch_size, cfg.seed)
    try:
        for step in range(1, cfg.steps + 1):
            batch = next(batches)
            optimizer.zero_grad(set_to_none=True)
            lb = batch_loss(forward_batch(model, batch), batch.masks, cfg.loss.bce_weight, cfg.loss.iou_weight)
            if not torch.isfinite(lb.total):
                raise TrainingError(f"non-finite loss {lb.as_row()} at step {step} on images {batch.ids}")
            lb.total.backward()
            if cfg.debug:
                _check_optimizer(model, optimizer, partition)
            optimizer.step()
            row = lb.as_row()
            losses.append(row)
            if writer is not None:
                writer.writerow([step, *(repr(v) for v in row)])
            if write and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_step{step}.pt", model, partition, optimizer, cfg, step)
    finally:
        if fh is not None:
            fh.close()

    if write:
        ckpt_path = out_dir / "checkpoint.pt"
        save_checkpoint(ckpt_path, model, partition, optimizer, cfg, cfg.steps)
    model.eval()
    return TrainResult(
        model, partition, optimizer, losses, ckpt_path, log_path, digest_before, frozen_digest(model, partition)
    )


def save_checkpoint(path, model: SaliencyModel, partition: ParamPartition, optimizer, cfg: RunConfig, step: int) -> None:
    """Trainable tensors, optimizer state and config; the backbone is rebuilt from its seed."""
    state = model.state_dict()
    side = {k: v.clone() for k, v in state.items() if not k.startswith("backbone.")}
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg.to_dict(),
            "side_state": side,
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "step": step,
            "backbone_seed": cfg.backbone.seed,
            "frozen_digest": frozen_digest(model, partition),
        },
        path,
    )


@dataclass
class LoadedCheckpoint:
    config: RunConfig
    model: SaliencyModel
    partition: ParamPartition
    step: int
    optimizer_state: Optional[dict]


def load_checkpoint(path) -> LoadedCheckpoint:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version')!r}")
    cfg = RunConfig.from_dict(blob["config"])
    model = SaliencyModel(cfg.model_config())
    partition = freeze_partition(model)
    if frozen_digest(model, partition) != blob["frozen_digest"]:
        raise CheckpointError(f"{path}: rebuilt backbone does not match the stored digest")
    missing, unexpected = model.load_state_dict(blob["side_state"], strict=False)
    missing = [k for k in missing if not k.startswith("backbone.")]
    if missing or unexpected:
        raise CheckpointError(f"{path}: state mismatch, missing={missing} unexpected={unexpected}")
    model.eval()
    return LoadedCheckpoint(cfg, model, partition, blob["step"], blob["optimizer"])


def evaluate_predictions(preds, gts, ids=None) -> MetricsReport:
    return aggregate([evaluate_pair(p, g) for p, g in zip(preds, gts)], ids)


@torch.no_grad()
def predict_samples(model: SaliencyModel, samples: list[Sample]) -> list[np.ndarray]:
    """Probability maps at each sample's original ground-truth resolution."""
    model.eval()
    out = []
    for s in samples:
        batch = collate([s])
        logits = model(batch.images, batch.prompts, batch.text, batch.text_mask)
        out.append(finalize_mask(logits, s.gt.shape)[0, 0].double().numpy())
    return out


def evaluate(checkpoint, data_root, out_dir=None) -> MetricsReport:
    """Eval-mode inference on ``data_root``; writes report.json and curve CSVs to ``out_dir``."""
    ck = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_checkpoint(checkpoint)
    cfg = ck.config
    index = DatasetIndex.from_root(data_root, cfg.backbone.input_resolution)
    samples = load_dataset(index, cfg.prompts, cfg.skip_bad_files)
    preds = predict_samples(ck.model, samples)
    report = evaluate_predictions(preds, [s.gt.numpy() for s in samples], [s.image_id for s in samples])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "report.json")
        report.write_curves(out)
    return report


def to_uint8(prob: np.ndarray) -> np.ndarray:
    """Pixel = round(probability * 255), halves rounded up."""
    return np.clip(np.floor(np.asarray(prob, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


@torch.no_grad()
def predict(checkpoint, image_path, out_path) -> Path:
    """Write an 8-bit grayscale saliency map at the input image's original size."""
    ck = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_checkpoint(checkpoint)
    image_path, out_path = Path(image_path), Path(out_path)
    try:
        raw = read_image(image_path)
    except OSError as e:
        raise OSError(f"cannot read image {image_path}: {e}") from e
    image = resize_image(raw, ck.config.backbone.input_resolution)
    bank = PromptBank(ck.config.prompts)
    prompts, text = bank.gather(image_path.stem, image)
    logits = ck.model(image, prompts, text)
    prob = finalize_mask(logits, raw.shape[-2:])[0].double().numpy()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(to_uint8(prob)).save(out_path)
    except OSError as e:
        raise OSError(f"cannot write {out_path}: {e}") from e
    return out_path


@torch.no_grad()
def dataset_loss(model: SaliencyModel, samples: list[Sample], cfg: RunConfig, batch_size: int = 10) -> float:
    """Mean total loss over ``samples`` in eval mode."""
    model.eval()
    totals = []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size])
        lb = batch_loss(forward_batch(model, batch), batch.masks, cfg.loss.bce_weight, cfg.loss.iou_weight)
        totals.append(float(lb.total) * len(batch.ids))
    return sum(totals) / len(samples)
