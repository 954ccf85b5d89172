"""Experiment orchestration: config -> datasets/models -> runs -> reports.

Every run writes a self-contained directory:

    <out>/<run_id>/
        student.graph      serialized architecture (feeds `analyze`)
        teacher/           teacher pretraining artifacts (when trained here)
        last.ckpt          resumable checkpoint of the final epoch
        best.ckpt          checkpoint of the best test top-1
        history.csv        per-epoch loss and accuracy curves
        eval.json          final EvalReport
        manifest.json      RunRecord tying it all together
        curves.png         written by `report`

Run ids are derived from (config name, seed) rather than timestamps so
reruns are deterministic and reports idempotent.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .backbone import build_student, build_teacher
from .config import ConfigError, RunConfig
from .data import FolderDataset, make_synthetic, scan_and_split, split_in_memory
from .metrics import EvalReport, evaluate
from .torch_backend import GraphModule, compile_graph
from .trainer import load_checkpoint, pretrain_teacher, train

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("model", "params_m", "flops_m", "top1", "top5")
ABLATION_COLUMNS = ("number", "gghostnet", "dkd", "params_m", "top1")


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    provenance: str
    eval: EvalReport
    history_path: str

    def to_json(self) -> str:
        return json.dumps({
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "provenance": self.provenance,
            "eval": self.eval.to_dict(),
            "history_path": self.history_path,
        }, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        raw = json.loads(Path(path).read_text())
        return cls(
            run_id=raw["run_id"],
            config_hash=raw["config_hash"],
            provenance=raw["provenance"],
            eval=EvalReport.from_dict(raw["eval"]),
            history_path=raw["history_path"],
        )


def provenance_string(cfg: RunConfig, seed: int) -> str:
    return f"distillkit@{__version__}+cfg:{cfg.config_hash or 'inline'}+seed:{seed}"


def build_datasets(cfg: RunConfig, seed: int | None = None):
    """(train, test) datasets per the [data] section. The split seed is the
    run seed unless overridden, so one config pins one split."""
    seed = cfg.run.seed if seed is None else seed
    if cfg.data.kind == "synthetic":
        pool = make_synthetic(cfg.data.classes, cfg.data.per_class,
                              cfg.data.image_hw, seed=seed, noise=cfg.data.noise)
        return split_in_memory(pool, cfg.data.split_ratio, seed=seed)
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise ConfigError(f"data.root: dataset root not found: {root}")
    train_m, test_m = scan_and_split(root, seed=seed, ratio=cfg.data.split_ratio)
    wrap = lambda m: FolderDataset(m, target_hw=cfg.data.image_hw,
                                   mean=cfg.data.mean, std=cfg.data.std)
    return wrap(train_m), wrap(test_m)


def _teacher_for_run(cfg: RunConfig, datasets, num_classes: int, seed: int,
                     run_dir: Path) -> GraphModule:
    """Load the configured teacher checkpoint or pretrain one in-run."""
    graph = build_teacher(cfg.teacher_config(num_classes))
    teacher = compile_graph(graph, seed=seed + 1)
    tcfg = cfg.teacher_train_config(seed=seed)
    if cfg.teacher.checkpoint:
        load_checkpoint(cfg.teacher.checkpoint, teacher, tcfg)
        log.info("loaded teacher checkpoint %s", cfg.teacher.checkpoint)
        return teacher
    teacher_dir = run_dir / "teacher"
    pretrain_teacher(teacher, datasets, tcfg, out_dir=teacher_dir,
                     config_hash=cfg.config_hash)
    graph.save(teacher_dir / "teacher.graph")
    return teacher


def run_train(cfg: RunConfig, out_root: str | Path, seed: int | None = None,
              resume: bool = False, distill_enabled: bool | None = None,
              teacher: GraphModule | None = None,
              run_id: str | None = None) -> tuple[RunRecord, Path]:
    """Execute one training run and write its artifact directory.

    ``teacher`` short-circuits teacher acquisition (the ablation reuses one
    pretrained teacher across rows); ``distill_enabled`` overrides the
    config toggle for the same reason.
    """
    seed = cfg.run.seed if seed is None else seed
    enabled = cfg.distill_enabled if distill_enabled is None else distill_enabled
    run_id = run_id or f"{cfg.run.name}-s{seed}"
    run_dir = Path(out_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    datasets = build_datasets(cfg, seed=seed)
    train_ds, test_ds = datasets
    num_classes = train_ds.num_classes

    student_graph = build_student(cfg.student_config(num_classes))
    student_graph.save(run_dir / "student.graph")
    student = compile_graph(student_graph, seed=seed)

    if enabled and teacher is None:
        teacher = _teacher_for_run(cfg, datasets, num_classes, seed, run_dir)
    if not enabled:
        teacher = None

    tcfg = cfg.train_config(seed=seed)
    student, history = train(teacher, student, datasets, tcfg, out_dir=run_dir,
                             resume=resume, config_hash=cfg.config_hash)

    report = evaluate(student, student_graph, test_ds, input_hw=cfg.data.image_hw,
                      batch_size=cfg.batch_size)
    (run_dir / "eval.json").write_text(report.to_json())

    record = RunRecord(
        run_id=run_id,
        config_hash=cfg.config_hash,
        provenance=provenance_string(cfg, seed),
        eval=report,
        history_path="history.csv",
    )
    (run_dir / "manifest.json").write_text(record.to_json())
    return record, run_dir


def run_eval(cfg: RunConfig, run_dir: str | Path,
             checkpoint: str | Path | None = None,
             seed: int | None = None) -> EvalReport:
    """Re-evaluate a stored checkpoint on the config's test split."""
    seed = cfg.run.seed if seed is None else seed
    run_dir = Path(run_dir)
    checkpoint = Path(checkpoint) if checkpoint else run_dir / "best.ckpt"
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    _, test_ds = build_datasets(cfg, seed=seed)
    graph = build_student(cfg.student_config(test_ds.num_classes))
    student = compile_graph(graph, seed=cfg.run.seed)
    load_checkpoint(checkpoint, student, cfg.train_config())
    report = evaluate(student, graph, test_ds, input_hw=cfg.data.image_hw,
                      batch_size=cfg.batch_size)
    (run_dir / "eval.json").write_text(report.to_json())
    return report


# -- ablation ----------------------------------------------------------------

def run_ablation(cfg: RunConfig, out_root: str | Path,
                 seed: int | None = None) -> list[dict[str, str]]:
    """Three-row study: baseline teacher, student without distillation,
    student with distillation. Returns the rendered table rows."""
    seed = cfg.run.seed if seed is None else seed
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    datasets = build_datasets(cfg, seed=seed)
    train_ds, test_ds = datasets
    num_classes = train_ds.num_classes

    # Row 1: the teacher itself.
    teacher_dir = out_root / f"{cfg.run.name}-ablate-teacher-s{seed}"
    teacher_dir.mkdir(parents=True, exist_ok=True)
    teacher_graph = build_teacher(cfg.teacher_config(num_classes))
    teacher = compile_graph(teacher_graph, seed=seed + 1)
    tcfg = cfg.teacher_train_config(seed=seed)
    if cfg.teacher.checkpoint:
        load_checkpoint(cfg.teacher.checkpoint, teacher, tcfg)
    else:
        pretrain_teacher(teacher, datasets, tcfg, out_dir=teacher_dir,
                         config_hash=cfg.config_hash)
    teacher_eval = evaluate(teacher, teacher_graph, test_ds,
                            input_hw=cfg.data.image_hw, batch_size=cfg.batch_size)

    # Rows 2 and 3 share the student architecture and init.
    plain_record, _ = run_train(cfg, out_root, seed=seed, distill_enabled=False,
                                run_id=f"{cfg.run.name}-ablate-plain-s{seed}")
    kd_record, _ = run_train(cfg, out_root, seed=seed, distill_enabled=True,
                             teacher=teacher,
                             run_id=f"{cfg.run.name}-ablate-dkd-s{seed}")

    rows = [
        {"number": "1", "gghostnet": "×", "dkd": "×",
         "params_m": f"{teacher_eval.params / 1e6:.2f}",
         "top1": f"{100.0 * teacher_eval.top1:.2f}"},
        {"number": "2", "gghostnet": "✓", "dkd": "×",
         "params_m": f"{plain_record.eval.params / 1e6:.2f}",
         "top1": f"{100.0 * plain_record.eval.top1:.2f}"},
        {"number": "3", "gghostnet": "✓", "dkd": "✓",
         "params_m": f"{kd_record.eval.params / 1e6:.2f}",
         "top1": f"{100.0 * kd_record.eval.top1:.2f}"},
    ]
    write_csv_rows(out_root / "ablation.csv", ABLATION_COLUMNS, rows)
    (out_root / "ablation.txt").write_text(render_table(ABLATION_COLUMNS, rows, title="Ablation"))
    return rows


# -- report rendering --------------------------------------------------------

def write_csv_rows(path: Path, columns, rows: list[dict[str, str]]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv_rows(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


HEADERS = {
    "model": "Model", "params_m": "Params (M)", "flops_m": "FLOPs (M)",
    "top1": "Top-1 (%)", "top5": "Top-5 (%)", "number": "Number",
    "gghostnet": "G-Ghost", "dkd": "DKD",
}


def render_table(columns, rows: list[dict[str, str]], title: str = "") -> str:
    headers = [HEADERS.get(c, c) for c in columns]
    widths = [max(len(h), *(len(r[c]) for r in rows)) if rows else len(h)
              for h, c in zip(headers, columns)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[c].ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines) + "\n"


def make_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Merge RunRecords into a params-sorted comparison table, re-rendering
    the CSV and emitting a loss/accuracy curve image per run."""
    records = []
    for run_dir in run_dirs:
        manifest = Path(run_dir) / "manifest.json"
        if not manifest.is_file():
            raise ConfigError(f"no manifest.json under {run_dir}")
        records.append((RunRecord.load(manifest), Path(run_dir)))
    if not records:
        raise ConfigError("no runs given")
    records.sort(key=lambda item: item[0].eval.params)

    rows = [{"model": rec.run_id, **dict(zip(TABLE_COLUMNS[1:], rec.eval.table_row()))}
            for rec, _ in records]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out_dir / "report.csv", TABLE_COLUMNS, rows)

    columns, csv_rows = read_csv_rows(out_dir / "report.csv")
    (out_dir / "report.txt").write_text(render_table(columns, csv_rows))
    # re-render from the parsed CSV and prove nothing was lost
    write_csv_rows(out_dir / "report_roundtrip.csv", columns, csv_rows)

    for rec, run_dir in records:
        history = run_dir / rec.history_path
        if history.is_file():
            plot_curves(history, out_dir / f"{rec.run_id}-curves.png")
    return out_dir


def plot_curves(history_csv: str | Path, out_png: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with Path(history_csv).open() as fh:
        rows = list(csv.DictReader(fh))
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("l_total", "l_task", "l_kd"):
        ax_loss.plot(epochs, [float(r[key]) for r in rows], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    for key in ("top1", "top5"):
        ax_acc.plot(epochs, [float(r[key]) for r in rows], label=key)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
