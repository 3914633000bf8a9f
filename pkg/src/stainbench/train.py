"""Training loop: L1 objective, SGD, cosine schedule stepped once per epoch."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import PairedDataset
from .layers import forward_backward, l1_loss
from .optim import TrainConfig, cosine_lr, sgd_step

log = logging.getLogger(__name__)

LOSS_HEADER = ["epoch", "lr", "train_l1", "val_l1"]


class NumericError(RuntimeError):
    pass


def mean_l1(model, inputs, targets, batch_size: int = 16) -> float:
    """Mean absolute error of the raw (unclamped) model output."""
    if not len(inputs):
        return math.nan
    total = 0.0
    for i in range(0, len(inputs), batch_size):
        x = inputs[i:i + batch_size].astype(model.dtype, copy=False)
        loss, _ = l1_loss(model(x), targets[i:i + batch_size])
        total += loss * len(x)
    return total / len(inputs)


def fit(model, data: PairedDataset, cfg: TrainConfig, out_dir=None, start_epoch: int = 0,
        velocity: dict | None = None, extra: dict | None = None, keep_all: bool = False):
    """Train ``model`` in place on the train split of ``data``.

    After each epoch the state goes to ``out_dir/checkpoint.ckpt`` (plus
    ``checkpoints/epoch_NNNN.ckpt`` when ``keep_all``) and a row is appended
    to ``out_dir/loss.csv``. Shuffling is seeded by (cfg.seed, epoch), so a
    resumed run repeats exactly what an uninterrupted one would have done.
    Returns the list of per-epoch rows.
    """
    train, val = data.subset("train"), data.subset("val")
    if not len(train):
        raise ValueError("no training pairs")
    velocity = {} if velocity is None else velocity
    out_dir = Path(out_dir) if out_dir else None
    csv_path = out_dir / "loss.csv" if out_dir else None
    if csv_path is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0 or not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_HEADER)

    x_all = train.inputs.astype(model.dtype, copy=False)
    y_all = train.targets.astype(model.dtype, copy=False)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[b:b + cfg.batch_size])
            loss, grads = forward_backward(model, x_all[idx], y_all[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch + 1}, batch {b // cfg.batch_size}")
            sgd_step(model.params, grads, lr, cfg, velocity)
            total += loss * len(idx)
        row = {"epoch": epoch + 1, "lr": lr, "train_l1": total / len(order),
               "val_l1": mean_l1(model, val.inputs, val.targets)}
        history.append(row)
        log.info("epoch %d/%d lr %.6f train_l1 %.5f val_l1 %.5f",
                 row["epoch"], cfg.epochs, lr, row["train_l1"], row["val_l1"])
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.ckpt", model, cfg, epoch + 1, velocity, extra)
            if keep_all:
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt",
                                model, cfg, epoch + 1, velocity, extra)
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["epoch"], repr(lr), repr(row["train_l1"]), repr(row["val_l1"])])
    return history
