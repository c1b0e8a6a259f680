"""Test-time adaptation by entropy minimization.

At deployment the input distribution drifts away from the training domain
and the classifier's running batch-norm statistics stop matching the data.
Adaptation runs each unlabeled test batch through the network with
batch-derived statistics, measures the mean prediction entropy, and takes a
gradient step on the BN scale/shift (gamma/beta) only.  Everything else,
running statistics included, stays bit-identical to the checkpoint.

``continual`` mode carries the adapted state across batches; ``episodic``
mode rewinds to the checkpoint state before every batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Adam, ModelParams, backward, entropy_loss_grad, forward


@dataclass
class AdaptConfig:
    """Knobs for one adaptation run.

    lr may be zero (a no-op run that still logs entropies) but never
    negative.
    """

    lr: float = 1e-3
    optimizer: str = "sgd"  # "sgd" | "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    mode: str = "continual"  # "continual" | "episodic"
    steps_per_batch: int = 1

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("continual", "episodic"):
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be at least 1")


class AdaptState:
    """Bookkeeping across adaptation steps.

    Snapshots gamma/beta exactly once, at construction, so episodic rewinds
    and explicit resets restore the pre-adaptation values bit-exactly.
    """

    def __init__(self, params: ModelParams) -> None:
        self.snapshot = {k: v.copy() for k, v in params.affine().items()}
        self.opt = Adam()
        self.batches_seen = 0
        self.entropy_log: list[float] = []
        self.last_grad_norm = 0.0


@dataclass(frozen=True)
class TrajectoryRecord:
    batch_index: int
    mean_entropy: float
    grad_norm: float
    accuracy: float | None = None


def _apply_step(
    params: ModelParams,
    state: AdaptState,
    grads: dict[str, np.ndarray],
    cfg: AdaptConfig,
) -> None:
    affine = params.affine()
    picked = {k: grads[k] for k in affine}
    if cfg.optimizer == "sgd":
        for key, tensor in affine.items():
            tensor -= cfg.lr * picked[key]
    else:
        state.opt.step(affine, picked, cfg.lr, cfg.beta1, cfg.beta2)


def adapt_batch(
    params: ModelParams,
    state: AdaptState,
    batch: np.ndarray,
    cfg: AdaptConfig | None = None,
) -> tuple[ModelParams, float]:
    """One adaptation update on a single (N, 1, H, W) batch, N >= 2.

    Mutates gamma/beta in place and returns (params, mean entropy of the
    batch before the update).  Running statistics are left untouched so the
    adapted model differs from the checkpoint in gamma/beta only.
    """
    cfg = cfg or AdaptConfig()
    entropy_before = 0.0
    for step in range(cfg.steps_per_batch):
        logits, cache = forward(params, batch, "batch_stats", update_running=False)
        loss, dlogits = entropy_loss_grad(logits)
        grads = backward(params, cache, dlogits, mask="affine").grads
        if step == 0:
            entropy_before = loss
            state.last_grad_norm = float(
                np.sqrt(sum(float((grads[k] ** 2).sum()) for k in params.affine()))
            )
        _apply_step(params, state, grads, cfg)
    state.entropy_log.append(entropy_before)
    state.batches_seen += 1
    return params, entropy_before


def adapt_stream(
    params: ModelParams,
    batches: Sequence[np.ndarray] | Iterable[np.ndarray],
    cfg: AdaptConfig | None = None,
) -> tuple[ModelParams, list[TrajectoryRecord]]:
    """Adapt over a stream of batches under the configured policy.

    Returns the final params and one trajectory record per batch.  An empty
    stream is an error.
    """
    cfg = cfg or AdaptConfig()
    state = AdaptState(params)
    trajectory: list[TrajectoryRecord] = []
    for i, batch in enumerate(batches):
        if cfg.mode == "episodic":
            reset(params, state)
        _, ent = adapt_batch(params, state, batch, cfg)
        trajectory.append(TrajectoryRecord(i, ent, state.last_grad_norm))
    if not trajectory:
        raise ValueError("adaptation stream is empty")
    return params, trajectory


def reset(params: ModelParams, state: AdaptState) -> ModelParams:
    """Restore the snapshot gamma/beta bit-exactly and clear optimizer
    moments.  Idempotent."""
    for key, tensor in params.affine().items():
        np.copyto(tensor, state.snapshot[key])
    state.opt = Adam()
    return params


def write_trajectory(
    records: Sequence[TrajectoryRecord], path: str | Path
) -> None:
    """CSV log: batch_index, mean_entropy, accuracy (may be blank),
    gradient_norm."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_index", "mean_entropy", "accuracy", "gradient_norm"])
        for r in records:
            acc = "" if r.accuracy is None else format(r.accuracy, ".17g")
            writer.writerow(
                [
                    r.batch_index,
                    format(r.mean_entropy, ".17g"),
                    acc,
                    format(r.grad_norm, ".17g"),
                ]
            )


def read_trajectory(path: str | Path) -> list[TrajectoryRecord]:
    records: list[TrajectoryRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            acc = row.get("accuracy", "")
            records.append(
                TrajectoryRecord(
                    int(row["batch_index"]),
                    float(row["mean_entropy"]),
                    float(row["gradient_norm"]),
                    float(acc) if acc else None,
                )
            )
    return records
