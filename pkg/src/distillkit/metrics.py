"""Top-k accuracy and evaluation reports.

Top-k membership breaks logit ties toward the lower class index (stable
sort on negated scores), which only matters for degenerate logits but
keeps the metric fully deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .complexity import count_macs, count_params


def _check_logits_labels(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be B x N, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("labels out of range")
    return logits, labels


def top_k_membership(logits: np.ndarray, k: int) -> np.ndarray:
    """Class indices of the k largest logits per row, ties to lower index."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def top_k_hits(logits, labels, k: int) -> int:
    logits, labels = _check_logits_labels(logits, labels)
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k must be in [1, {logits.shape[1]}], got {k}")
    member = top_k_membership(logits, k)
    return int((member == labels[:, None]).any(axis=1).sum())


def top_k_accuracy(logits, labels, k: int) -> float:
    logits, labels = _check_logits_labels(logits, labels)
    if logits.shape[0] == 0:
        raise ValueError("cannot compute accuracy over an empty batch")
    return top_k_hits(logits, labels, k) / logits.shape[0]


def confusion_matrix(logits, labels, num_classes: int) -> np.ndarray:
    """counts[true, predicted] with argmax prediction (ties to lower index)."""
    logits, labels = _check_logits_labels(logits, labels)
    preds = np.argmax(logits, axis=1)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


@dataclass
class EvalReport:
    n_total: int
    n_correct: int
    n_top5: int
    top1: float
    top5: float
    per_class_top1: dict[str, float] = field(default_factory=dict)
    params: int = 0
    flops: int = 0

    def __post_init__(self):
        if not 0 <= self.n_correct <= self.n_top5 <= self.n_total:
            raise ValueError(
                f"inconsistent counts: correct={self.n_correct} top5={self.n_top5} "
                f"total={self.n_total}"
            )

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_correct": self.n_correct,
            "n_top5": self.n_top5,
            "top1": self.top1,
            "top5": self.top5,
            "per_class_top1": self.per_class_top1,
            "params": self.params,
            "flops": self.flops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            n_total=int(raw["n_total"]),
            n_correct=int(raw["n_correct"]),
            n_top5=int(raw["n_top5"]),
            top1=float(raw["top1"]),
            top5=float(raw["top5"]),
            per_class_top1=dict(raw.get("per_class_top1", {})),
            params=int(raw.get("params", 0)),
            flops=int(raw.get("flops", 0)),
        )

    def table_row(self) -> list[str]:
        """Comparison-table cells: Params (M), FLOPs (M), Top-1 (%), Top-5 (%)."""
        return [
            f"{self.params / 1e6:.2f}",
            f"{self.flops / 1e6:.2f}",
            f"{100.0 * self.top1:.2f}",
            f"{100.0 * self.top5:.2f}",
        ]


def collect_logits(module, dataset, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Run the module over the dataset in manifest order; returns
    (logits, labels) as numpy arrays."""
    module.eval()
    all_logits = []
    all_labels = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            images, labels = dataset.load_batch(list(idx))
            x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
            all_logits.append(module(x).numpy())
            all_labels.append(labels)
    return np.concatenate(all_logits, axis=0), np.concatenate(all_labels, axis=0)


def accuracy_on_dataset(module, dataset, batch_size: int = 32) -> tuple[float, float]:
    """(top1, top5) with k capped at the class count."""
    logits, labels = collect_logits(module, dataset, batch_size)
    n = logits.shape[1]
    return top_k_accuracy(logits, labels, 1), top_k_accuracy(logits, labels, min(5, n))


def evaluate(module, graph, dataset, input_hw: tuple[int, int],
             batch_size: int = 32) -> EvalReport:
    """Full evaluation over a dataset, with analyzer params/FLOPs attached.

    Per-class accuracy goes beyond the headline metrics and is reported
    as a diagnostic extra.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits, labels = collect_logits(module, dataset, batch_size)
    n_classes = logits.shape[1]
    k5 = min(5, n_classes)
    n_total = logits.shape[0]
    n_correct = top_k_hits(logits, labels, 1)
    n_top5 = top_k_hits(logits, labels, k5)

    per_class: dict[str, float] = {}
    names = getattr(dataset, "class_names", [str(i) for i in range(n_classes)])
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            per_class[names[c]] = top_k_accuracy(logits[mask], labels[mask], 1)

    return EvalReport(
        n_total=n_total,
        n_correct=n_correct,
        n_top5=n_top5,
        top1=n_correct / n_total,
        top5=n_top5 / n_total,
        per_class_top1=per_class,
        params=count_params(graph),
        flops=count_macs(graph, input_hw),
    )
