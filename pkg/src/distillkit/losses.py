"""Decoupled distillation losses over teacher/student logit batches.

All operations take B x N logit matrices (rows = samples, columns =
classes) and treat the teacher as a constant: teacher logits are detached
on entry, so gradients only ever flow into the student.

Two decompositions of the tempered KL objective are provided:

* ``row_column``: a per-sample KL across classes (inter-class) plus a
  per-class KL across the batch (intra-class). The intra term applies the
  temperature softmax along the batch axis, mirroring the row case.
* ``target_nontarget``: a binary KL on (labeled class, rest) plus a KL
  over the non-target classes renormalized to sum to one.

Probabilities are floored at ``PROB_FLOOR`` inside log ratios so losses
stay finite even for degenerate inputs; the floor is far below the
tolerances any of the oracle checks use.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F

Axis = Literal["row", "column"]
Variant = Literal["row_column", "target_nontarget"]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    """Temperature, per-term weights and decomposition selector.

    ``weight_task`` is an escape hatch for distillation-only training;
    leaving every weight at 1 gives the plain combined objective. Setting
    both KD weights to 0 disables distillation entirely (the trainer does
    this when pretraining a teacher).
    """

    temperature: float = 4.0
    weight_inter: float = 1.0
    weight_intra: float = 1.0
    weight_task: float = 1.0
    variant: Variant = "row_column"

    def __post_init__(self):
        _check_temperature(self.temperature)
        for name in ("weight_inter", "weight_intra", "weight_task"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.variant not in ("row_column", "target_nontarget"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class LossBreakdown:
    """Scalar loss terms; all 0-dim tensors so ``l_total`` is backpropable."""

    l_task: torch.Tensor
    l_inter: torch.Tensor
    l_intra: torch.Tensor
    l_kd: torch.Tensor
    l_total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {
            "l_task": float(self.l_task.detach()),
            "l_inter": float(self.l_inter.detach()),
            "l_intra": float(self.l_intra.detach()),
            "l_kd": float(self.l_kd.detach()),
            "l_total": float(self.l_total.detach()),
        }


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def _check_logits(logits: torch.Tensor, name: str = "logits") -> None:
    if logits.ndim != 2:
        raise ValueError(f"{name} must be a B x N matrix, got shape {tuple(logits.shape)}")
    if logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"{name} needs B >= 1 and N >= 2, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError(f"{name} contains non-finite entries")


def _check_pair(teacher: torch.Tensor, student: torch.Tensor) -> None:
    _check_logits(teacher, "teacher logits")
    _check_logits(student, "student logits")
    if teacher.shape != student.shape:
        raise ValueError(
            f"teacher and student shapes differ: {tuple(teacher.shape)} vs "
            f"{tuple(student.shape)}"
        )


def _check_labels(labels: torch.Tensor, batch: int, classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    if labels.shape != (batch,):
        raise ValueError(f"labels must have shape ({batch},), got {tuple(labels.shape)}")
    if labels.dtype not in (torch.int64, torch.int32):
        raise ValueError(f"labels must be integer class indices, got dtype {labels.dtype}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(
            f"labels must lie in [0, {classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return labels.long()


def temp_softmax(logits: torch.Tensor, temperature: float, axis: Axis = "row") -> torch.Tensor:
    """Tempered softmax along the class axis (``row``) or batch axis
    (``column``). Shift-invariant per slice and computed stably."""
    _check_temperature(temperature)
    _check_logits(logits)
    if axis not in ("row", "column"):
        raise ValueError(f"axis must be 'row' or 'column', got {axis!r}")
    dim = 1 if axis == "row" else 0
    return torch.softmax(logits / temperature, dim=dim)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) for two 1-D distributions. Zero-probability p entries
    contribute nothing; q is floored at ``PROB_FLOOR`` so the result stays
    finite where plain division would blow up."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"p and q must be 1-D of equal length, got {tuple(p.shape)} "
                         f"and {tuple(q.shape)}")
    for name, dist in (("p", p), ("q", q)):
        if (dist < 0).any():
            raise ValueError(f"{name} has negative entries")
        if abs(float(dist.sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} must sum to 1 within 1e-6, sums to {float(dist.sum())}")
    return torch.xlogy(p, p / q.clamp_min(PROB_FLOOR)).sum()


def _tempered_kl_sum(teacher: torch.Tensor, student: torch.Tensor,
                     temperature: float, dim: int) -> torch.Tensor:
    """Sum over slices (along ``dim``) of KL(tempered teacher || tempered
    student), computed in log space."""
    log_p = F.log_softmax(teacher / temperature, dim=dim)
    log_q = F.log_softmax(student / temperature, dim=dim)
    return (log_p.exp() * (log_p - log_q)).sum()


def kd_loss_rowwise(teacher: torch.Tensor, student: torch.Tensor,
                    temperature: float) -> torch.Tensor:
    """Classic tempered distillation loss: (T^2 / B) * sum over samples of
    the row-wise KL between tempered teacher and student distributions."""
    _check_temperature(temperature)
    _check_pair(teacher, student)
    teacher = teacher.detach()
    batch = teacher.shape[0]
    return (temperature ** 2 / batch) * _tempered_kl_sum(teacher, student, temperature, dim=1)


def inter_class_loss(teacher: torch.Tensor, student: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """The inter-class half of the row/column decomposition. Same
    expression as ``kd_loss_rowwise``; kept as its own name so the
    decomposition is explicit at call sites."""
    return kd_loss_rowwise(teacher, student, temperature)


def intra_class_loss(teacher: torch.Tensor, student: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """The intra-class half: (T^2 / N) * sum over classes of the KL between
    column distributions, where the temperature softmax runs along the
    batch axis. Trivially zero for B == 1 (single-sample columns)."""
    _check_temperature(temperature)
    _check_pair(teacher, student)
    teacher = teacher.detach()
    batch, classes = teacher.shape
    if batch == 1:
        warnings.warn(
            "intra-class loss is trivially zero for batch size 1 "
            "(every column distribution is a single point)",
            RuntimeWarning,
            stacklevel=2,
        )
    return (temperature ** 2 / classes) * _tempered_kl_sum(teacher, student, temperature, dim=0)


def total_kd_loss(teacher: torch.Tensor, student: torch.Tensor,
                  cfg: DistillConfig) -> LossBreakdown:
    """Combined row/column distillation loss:
    ``l_kd = weight_inter * l_inter + weight_intra * l_intra``."""
    l_inter = inter_class_loss(teacher, student, cfg.temperature)
    l_intra = intra_class_loss(teacher, student, cfg.temperature)
    l_kd = cfg.weight_inter * l_inter + cfg.weight_intra * l_intra
    l_task = torch.zeros((), dtype=student.dtype, device=student.device)
    return LossBreakdown(l_task=l_task, l_inter=l_inter, l_intra=l_intra,
                         l_kd=l_kd, l_total=l_task + l_kd)


def target_nontarget_loss(teacher: torch.Tensor, student: torch.Tensor,
                          labels: torch.Tensor, cfg: DistillConfig) -> LossBreakdown:
    """Decoupled loss on the (target, rest) split.

    The binary term is the KL between (p_target, 1 - p_target) pairs of
    tempered probabilities; the non-target term is the KL between the
    tempered distributions restricted to non-target classes and
    renormalized (equivalently: softmax over the non-target logits). Both
    are batch means scaled by T^2. The ``l_inter`` slot carries the binary
    term, ``l_intra`` the non-target term.
    """
    _check_pair(teacher, student)
    batch, classes = teacher.shape
    labels = _check_labels(labels, batch, classes)
    teacher = teacher.detach()
    temperature = cfg.temperature
    scale = temperature ** 2 / batch

    p_full = torch.softmax(teacher / temperature, dim=1)
    q_full = torch.softmax(student / temperature, dim=1)
    p_t = p_full.gather(1, labels[:, None]).squeeze(1)
    q_t = q_full.gather(1, labels[:, None]).squeeze(1)

    binary = (
        torch.xlogy(p_t, p_t / q_t.clamp_min(PROB_FLOOR))
        + torch.xlogy(1 - p_t, (1 - p_t) / (1 - q_t).clamp_min(PROB_FLOOR))
    ).sum() * scale

    if classes == 2:
        warnings.warn(
            "non-target term is trivially zero for N == 2 (a single "
            "non-target class renormalizes to probability 1)",
            RuntimeWarning,
            stacklevel=2,
        )
        nontarget = torch.zeros((), dtype=student.dtype, device=student.device)
    else:
        target_mask = F.one_hot(labels, classes).bool()
        neg_inf = torch.finfo(student.dtype).min
        log_p_rest = F.log_softmax(
            (teacher / temperature).masked_fill(target_mask, neg_inf), dim=1)
        log_q_rest = F.log_softmax(
            (student / temperature).masked_fill(target_mask, neg_inf), dim=1)
        contrib = log_p_rest.exp() * (log_p_rest - log_q_rest)
        contrib = torch.where(target_mask, torch.zeros_like(contrib), contrib)
        nontarget = contrib.sum() * scale

    l_kd = cfg.weight_inter * binary + cfg.weight_intra * nontarget
    l_task = torch.zeros((), dtype=student.dtype, device=student.device)
    return LossBreakdown(l_task=l_task, l_inter=binary, l_intra=nontarget,
                         l_kd=l_kd, l_total=l_task + l_kd)


def total_loss(teacher: torch.Tensor, student: torch.Tensor,
               labels: torch.Tensor, cfg: DistillConfig) -> LossBreakdown:
    """Full training objective: weighted cross-entropy of the student
    against the labels plus the configured distillation loss."""
    _check_pair(teacher, student)
    labels = _check_labels(labels, student.shape[0], student.shape[1])
    if cfg.variant == "target_nontarget":
        kd = target_nontarget_loss(teacher, student, labels, cfg)
    else:
        kd = total_kd_loss(teacher, student, cfg)
    l_task = cfg.weight_task * F.cross_entropy(student, labels)
    return LossBreakdown(l_task=l_task, l_inter=kd.l_inter, l_intra=kd.l_intra,
                         l_kd=kd.l_kd, l_total=l_task + kd.l_kd)


def task_only_loss(student: torch.Tensor, labels: torch.Tensor,
                   cfg: DistillConfig | None = None) -> LossBreakdown:
    """Plain cross-entropy objective with zeroed distillation slots; used
    when training without a teacher."""
    _check_logits(student, "student logits")
    labels = _check_labels(labels, student.shape[0], student.shape[1])
    weight_task = cfg.weight_task if cfg is not None else 1.0
    l_task = weight_task * F.cross_entropy(student, labels)
    zero = torch.zeros((), dtype=student.dtype, device=student.device)
    return LossBreakdown(l_task=l_task, l_inter=zero, l_intra=zero,
                         l_kd=zero, l_total=l_task + zero)
