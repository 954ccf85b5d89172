"""Teacher-student training loop.

The optimizer is SGD with momentum and decoupled-by-group weight decay:
``v <- m * v + (g + wd * w); w <- w - lr * v`` (decay folded into the
gradient, which is what ``torch.optim.SGD`` with zero dampening computes).
Weight decay applies to conv/linear weights only. The learning rate
follows a cosine from ``lr`` down to ``lr_final`` across epochs.

Determinism contract: model init is seeded per (seed, role), the batch
order of epoch ``e`` is a pure function of (seed, e), and evaluation runs
in manifest order, so a fixed-seed run reproduces its loss history
exactly on the same backend.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .losses import DistillConfig, LossBreakdown, task_only_loss, total_loss
from .metrics import accuracy_on_dataset
from .torch_backend import GraphModule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "l_task", "l_inter", "l_intra", "l_kd", "l_total", "top1", "top5")


class TrainingAbort(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.01
    lr_final: float = 1e-4
    momentum: float = 0.937
    weight_decay: float = 0.00005
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class TrainState:
    """Mutable loop state: the student, its optimizer slots and progress
    counters. Serializes round-trip bit-exactly through checkpoints."""

    student: GraphModule
    optimizer: torch.optim.SGD
    epoch: int = 0          # epochs completed
    step: int = 0
    best_top1: float = -1.0
    loss_history: list[dict[str, float]] = field(default_factory=list)


def make_optimizer(student: GraphModule, cfg: TrainConfig) -> torch.optim.SGD:
    decay, rest = student.parameter_groups()
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": rest, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        momentum=cfg.momentum,
        dampening=0.0,
        nesterov=False,
    )


def init_train_state(student: GraphModule, cfg: TrainConfig) -> TrainState:
    return TrainState(student=student, optimizer=make_optimizer(student, cfg))


def cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs == 1:
        return cfg.lr
    t = epoch / (cfg.epochs - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Batch order for an epoch; a pure function of (seed, epoch) so
    resumed runs replay the identical order."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _to_tensors(batch) -> tuple[torch.Tensor, torch.Tensor]:
    images, labels = batch
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.ascontiguousarray(labels)).long()
    return x, y


def _logit_stats(logits: torch.Tensor) -> str:
    finite = logits[torch.isfinite(logits)]
    lo = float(finite.min()) if finite.numel() else float("nan")
    hi = float(finite.max()) if finite.numel() else float("nan")
    bad = int((~torch.isfinite(logits)).sum())
    return f"logit stats: finite range [{lo:.4g}, {hi:.4g}], non-finite entries: {bad}"


def train_step(state: TrainState, teacher: GraphModule | None, student: GraphModule,
               batch, cfg: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One SGD update on one batch. Teacher logits are computed without
    gradient; passing ``teacher=None`` trains on cross-entropy alone."""
    x, y = _to_tensors(batch)
    if x.shape[0] == 0:
        raise ValueError("batch is empty")
    if teacher is not None:
        with torch.no_grad():
            teacher_logits = teacher(x)
    else:
        teacher_logits = None
    student_logits = student(x)

    if not torch.isfinite(student_logits).all():
        raise TrainingAbort(
            f"non-finite student logits at step {state.step} (epoch {state.epoch}); "
            f"{_logit_stats(student_logits)}"
        )
    if teacher_logits is not None:
        breakdown = total_loss(teacher_logits, student_logits, y, cfg.distill)
    else:
        breakdown = task_only_loss(student_logits, y, cfg.distill)

    if not torch.isfinite(breakdown.l_total):
        raise TrainingAbort(
            f"non-finite loss at step {state.step} "
            f"(epoch {state.epoch}): {breakdown.floats()}; {_logit_stats(student_logits)}"
        )

    state.optimizer.zero_grad()
    breakdown.l_total.backward()
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(breakdown.floats())
    return state, breakdown


def _history_csv(history: list[dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row[c] if c == "epoch" else repr(float(row[c]))
                         for c in HISTORY_COLUMNS])
    return buf.getvalue()


def write_history(history: list[dict[str, float]], path: str | Path) -> None:
    Path(path).write_text(_history_csv(history))


def save_checkpoint(state: TrainState, path: str | Path, config_hash: str = "") -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "kind": "distillkit-checkpoint",
        "epoch": state.epoch,
        "step": state.step,
        "best_top1": state.best_top1,
        "model": state.student.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "loss_history": state.loss_history,
        "config_hash": config_hash,
    }, path)


def load_checkpoint(path: str | Path, student: GraphModule,
                    cfg: TrainConfig) -> TrainState:
    """Restore a checkpoint into a freshly built student of the same
    architecture; returns the reconstructed loop state."""
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    student.load_state_dict(payload["model"])
    state = init_train_state(student, cfg)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = int(payload["epoch"])
    state.step = int(payload["step"])
    state.best_top1 = float(payload["best_top1"])
    state.loss_history = list(payload["loss_history"])
    torch.set_rng_state(payload["torch_rng"])
    return state


def freeze(module: GraphModule) -> GraphModule:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def train(teacher: GraphModule | None, student: GraphModule, datasets,
          cfg: TrainConfig, out_dir: str | Path | None = None,
          resume: bool = False, config_hash: str = "",
          stop_after: int | None = None) -> tuple[GraphModule, list[dict]]:
    """Full training run: per-epoch passes over the train split, per-epoch
    evaluation on the test split, best-top1 and last checkpoints, and a
    history row per epoch.

    ``stop_after`` ends the session early after that many epochs while
    keeping the cfg.epochs schedule, simulating an interrupted run that a
    later ``resume=True`` call picks up from the last checkpoint.
    """
    train_ds, test_ds = datasets
    if teacher is not None:
        freeze(teacher)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = init_train_state(student, cfg)
    history: list[dict[str, float]] = []
    if resume and out is not None and (out / "last.ckpt").exists():
        state = load_checkpoint(out / "last.ckpt", student, cfg)
        history = _read_history(out)
        log.info("resumed from %s at epoch %d", out / "last.ckpt", state.epoch)

    for epoch in range(state.epoch, cfg.epochs):
        _set_lr(state.optimizer, cosine_lr(cfg, epoch))
        student.train()
        perm = epoch_permutation(cfg.seed, epoch, len(train_ds))
        sums = {key: 0.0 for key in ("l_task", "l_inter", "l_intra", "l_kd", "l_total")}
        steps = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = train_ds.load_batch(idx)
            state, breakdown = train_step(state, teacher, student, batch, cfg)
            values = breakdown.floats()
            for key in sums:
                sums[key] += values[key]
            steps += 1

        top1, top5 = accuracy_on_dataset(student, test_ds, cfg.batch_size)
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()},
               "top1": top1, "top5": top5}
        history.append(row)
        state.epoch = epoch + 1

        if out is not None:
            if top1 > state.best_top1:
                state.best_top1 = top1
                save_checkpoint(state, out / "best.ckpt", config_hash)
            save_checkpoint(state, out / "last.ckpt", config_hash)
            write_history(history, out / "history.csv")

        if stop_after is not None and state.epoch >= stop_after:
            break

    return student, history


def _read_history(out: Path) -> list[dict]:
    path = out / "history.csv"
    if not path.exists():
        return []
    rows = []
    with path.open() as fh:
        for raw in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in raw.items()})
    return rows


def pretrain_teacher(teacher: GraphModule, datasets, cfg: TrainConfig,
                     out_dir: str | Path | None = None,
                     config_hash: str = "") -> tuple[GraphModule, list[dict]]:
    """Same loop with distillation disabled (no teacher, plain
    cross-entropy); produces the baseline the ablation's first row needs."""
    plain = replace(cfg, distill=replace(cfg.distill, weight_inter=0.0, weight_intra=0.0))
    return train(None, teacher, datasets, plain, out_dir=out_dir, config_hash=config_hash)
