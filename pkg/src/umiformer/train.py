"""Training loop, evaluation protocol and checkpoint plumbing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.nn import Module
from .autodiff.optim import OptimizerState, adamw_step, step_lr
from .autodiff.tensor import NumericalError, Tensor, no_grad, precision
from .config import RunConfig, config_from_meta
from .data import VoxelDataset, load_dataset
from .decoder import Decoder, binarize
from .encoder import Encoder, Trace
from .metrics import dice_loss, dice_value, iou, voxel_f_score

log = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32
EVAL_SEED = 7_919


class TrainingDiverged(RuntimeError):
    pass


class UMIFormer(Module):
    def __init__(self, cfg: RunConfig):
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.encoder_config(), rng)
        self.decoder = Decoder(cfg.decoder_config(), rng)
        self.name_parameters()

    def forward(self, images, trace: Optional[Trace] = None) -> Tensor:
        return self.decoder(self.encoder(images, trace))


def build_model(cfg: RunConfig, dtype=TRAIN_DTYPE) -> UMIFormer:
    with precision(dtype):
        return UMIFormer(cfg)


def batch_images(views: np.ndarray, dtype=TRAIN_DTYPE) -> np.ndarray:
    """(B, n, H, W) silhouettes -> (B, n, H, W, 1) model input."""
    return np.ascontiguousarray(views[..., None], dtype=dtype)


def eval_view_order(seed: int, total: int) -> np.ndarray:
    """Fixed per-shape view permutation; evaluating with n views uses its first n."""
    return np.random.default_rng([EVAL_SEED, int(seed)]).permutation(total)


def predict(model: UMIFormer, views: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Occupancy probabilities for a stack of view sets (B, n, H, W)."""
    dtype = model.decoder.queries.dtype
    out = []
    with no_grad():
        for start in range(0, len(views), batch_size):
            out.append(model(batch_images(views[start : start + batch_size], dtype)).data)
    return np.concatenate(out)


def select_eval_views(data: VoxelDataset, n: int) -> np.ndarray:
    return np.stack([data.views[i][eval_view_order(s, data.views.shape[1])[:n]] for i, s in enumerate(data.seeds)])


def validation_loss(model: UMIFormer, data: VoxelDataset, n_views: int) -> float:
    probs = predict(model, select_eval_views(data, n_views))
    return float(np.mean([dice_value(p, g) for p, g in zip(probs, data.voxels)]))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def _checkpoint_tensors(model: UMIFormer, state: OptimizerState) -> dict[str, np.ndarray]:
    tensors = dict(model.state_dict())
    for name, m in state.first_moment.items():
        tensors[f"optim.m.{name}"] = m
    for name, v in state.second_moment.items():
        tensors[f"optim.v.{name}"] = v
    return tensors


def save_training_state(path, model: UMIFormer, state: OptimizerState, cfg: RunConfig, epoch: int) -> None:
    meta = cfg.to_text_map()
    meta["train.epoch"] = str(epoch)
    meta["train.step"] = str(state.step_count)
    save_checkpoint(path, _checkpoint_tensors(model, state), meta)


def load_model(path, dtype=TRAIN_DTYPE) -> tuple[UMIFormer, RunConfig, dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    cfg = config_from_meta(meta)
    model = build_model(cfg, dtype)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    return model, cfg, meta


def _restore_optimizer(tensors: dict[str, np.ndarray], meta: dict[str, str], state: OptimizerState) -> None:
    state.step_count = int(meta.get("train.step", 0))
    for key, arr in tensors.items():
        if key.startswith("optim.m."):
            state.first_moment[key[len("optim.m."):]] = arr.astype(TRAIN_DTYPE)
        elif key.startswith("optim.v."):
            state.second_moment[key[len("optim.v."):]] = arr.astype(TRAIN_DTYPE)


def _first_nonfinite(model: UMIFormer) -> Optional[str]:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return name
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"{name}.grad"
    return None


def train(
    cfg: RunConfig,
    data: Optional[VoxelDataset] = None,
    out_dir=None,
    resume=None,
    stop_after: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[UMIFormer, list[EpochRecord]]:
    """Train from scratch (or from ``resume``) and return the model and per-epoch log.

    With ``out_dir`` a checkpoint is written after every epoch
    (``epoch_XXX.umif`` and ``last.umif``) and ``loss_log.csv`` gains a row.
    ``stop_after`` ends the run after that many epochs in total, which is how
    resumability is exercised.
    """
    data = data if data is not None else load_dataset(cfg.dataset)
    train_set, val_set = data.split()
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    model = build_model(cfg)
    state = OptimizerState(
        learning_rate=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay
    )
    start_epoch = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        _restore_optimizer(tensors, meta, state)
        start_epoch = int(meta.get("train.epoch", 0))
    params = model.parameters()
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        if resume is None or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\r\n").writerow(["epoch", "lr", "train_loss", "val_loss"])
    history: list[EpochRecord] = []
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    total_views = train_set.views.shape[1]
    for epoch in range(start_epoch, end_epoch):
        state.learning_rate = step_lr(cfg.lr, epoch, cfg.lr_decay_epochs)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            picks = np.stack([rng.choice(total_views, size=cfg.n_views_train, replace=False) for _ in idx])
            views = train_set.views[idx[:, None], picks]
            try:
                probs = model(batch_images(views))
                loss = ops.reduce_mean(dice_loss(probs, train_set.voxels[idx].astype(TRAIN_DTYPE)))
                loss.backward()
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}; first non-finite tensor: {_first_nonfinite(model)}") from exc
            bad = _first_nonfinite(model)
            if bad is not None:
                raise TrainingDiverged(f"epoch {epoch}: non-finite values in {bad}")
            adamw_step(params, state)
            model.zero_grad()
            losses.append(loss.item())
        record = EpochRecord(
            epoch=epoch,
            lr=state.learning_rate,
            train_loss=float(np.mean(losses)),
            val_loss=validation_loss(model, val_set, cfg.n_views_train) if len(val_set) else float("nan"),
        )
        history.append(record)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, record.lr, record.train_loss, record.val_loss)
        if out is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\r\n").writerow(
                    [epoch, repr(record.lr), repr(record.train_loss), repr(record.val_loss)]
                )
            save_training_state(out / f"epoch_{epoch:03d}.umif", model, state, cfg, epoch + 1)
            save_training_state(out / "last.umif", model, state, cfg, epoch + 1)
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def constant_baseline_loss(data: VoxelDataset, value: float = 0.5) -> float:
    """Mean Dice loss of predicting ``value`` everywhere."""
    return float(np.mean([dice_value(np.full(v.shape, value), v) for v in data.voxels]))


@dataclass
class EvalRow:
    sample_id: int
    n_views: int
    iou: float
    fscore: float
    dice: float


def evaluate_predictions(probs: np.ndarray, gt: np.ndarray, seeds: Sequence[int], n: int, threshold: float) -> list[EvalRow]:
    rows = []
    for p, g, s in zip(probs, gt, seeds):
        rows.append(
            EvalRow(
                sample_id=int(s),
                n_views=n,
                iou=iou(p, g, threshold),
                fscore=voxel_f_score(binarize(p, threshold), g, seed=int(s)),
                dice=dice_value(p, g),
            )
        )
    return rows


def evaluate(model: UMIFormer, data: VoxelDataset, n_views: Sequence[int], threshold: float) -> list[EvalRow]:
    if not n_views:
        raise ValueError("need at least one view count")
    total = data.views.shape[1]
    for n in n_views:
        if not 1 <= n <= total:
            raise ValueError(f"n_views={n} outside [1, {total}] stored views")
    rows = []
    for n in n_views:
        probs = predict(model, select_eval_views(data, n))
        rows.extend(evaluate_predictions(probs, data.voxels, data.seeds, n, threshold))
    return rows


def mean_by_views(rows: Sequence[EvalRow]) -> dict[int, dict[str, float]]:
    out: dict[int, dict[str, float]] = {}
    for n in sorted({r.n_views for r in rows}):
        sel = [r for r in rows if r.n_views == n]
        out[n] = {
            "iou": float(np.mean([r.iou for r in sel])),
            "fscore": float(np.mean([r.fscore for r in sel])),
            "dice": float(np.mean([r.dice for r in sel])),
        }
    return out


def write_eval_csv(path, rows: Sequence[EvalRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["sample_id", "n_views", "iou", "fscore", "dice"])
        for r in rows:
            w.writerow([r.sample_id, r.n_views, repr(r.iou), repr(r.fscore), repr(r.dice)])
        for n, m in mean_by_views(rows).items():
            w.writerow(["mean", n, repr(m["iou"]), repr(m["fscore"]), repr(m["dice"])])
