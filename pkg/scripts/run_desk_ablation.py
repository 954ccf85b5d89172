#!/usr/bin/env python3
"""Three-seed desk ablation: plain student vs distilled student.

Pretrains one slim teacher on the synthetic benchmark, then trains the
student with and without distillation from three seeds (shared init per
seed, so the loss is the only difference). Prints per-seed outcomes and
the three-row summary table for the first seed.
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from distillkit.backbone import (
    build_student,
    build_teacher,
    desk_student_config,
    desk_teacher_config,
)
from distillkit.data import make_synthetic, split_in_memory
from distillkit.losses import DistillConfig
from distillkit.metrics import accuracy_on_dataset, evaluate
from distillkit.torch_backend import compile_graph
from distillkit.trainer import TrainConfig, pretrain_teacher, train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=35)
    parser.add_argument("--teacher-epochs", type=int, default=20)
    parser.add_argument("--noise", type=float, default=0.2)
    args = parser.parse_args()

    pool = make_synthetic(4, 62, (32, 32), seed=100, noise=args.noise)
    datasets = split_in_memory(pool, 0.8, seed=100)
    train_ds, test_ds = datasets
    print(f"dataset: {len(train_ds)} train / {len(test_ds)} test")

    teacher_graph = build_teacher(desk_teacher_config())
    teacher = compile_graph(teacher_graph, seed=1)
    tcfg = TrainConfig(epochs=args.teacher_epochs, batch_size=32, lr=0.02, seed=0)
    t0 = time.time()
    pretrain_teacher(teacher, datasets, tcfg)
    teacher_report = evaluate(teacher, teacher_graph, test_ds, input_hw=(32, 32))
    train_top1, _ = accuracy_on_dataset(teacher, train_ds)
    print(f"teacher ({time.time() - t0:.0f}s): train top1 {train_top1:.3f}, "
          f"test top1 {teacher_report.top1:.3f}, params {teacher_report.params / 1e6:.2f}M")

    student_graph = build_student(desk_student_config())
    wins = 0
    first_rows = None
    for seed in args.seeds:
        finals = {}
        for distilled in (False, True):
            student = compile_graph(student_graph, seed=1000 + seed)
            cfg = TrainConfig(epochs=args.epochs, batch_size=32, lr=0.02, seed=seed,
                              distill=DistillConfig(temperature=4.0))
            _, history = train(teacher if distilled else None, student, datasets, cfg)
            key = "distilled" if distilled else "plain"
            finals[key] = history[-1]["top1"]
            if seed == args.seeds[0]:
                report = evaluate(student, student_graph, test_ds, input_hw=(32, 32))
                finals[key + "_report"] = report
        better = finals["distilled"] >= finals["plain"]
        wins += better
        print(f"seed {seed}: plain {finals['plain']:.3f}  "
              f"distilled {finals['distilled']:.3f}  {'>=' if better else '<'}")
        if seed == args.seeds[0]:
            first_rows = finals

    print(f"\ndistilled >= plain in {wins}/{len(args.seeds)} seeds")
    if first_rows:
        p = first_rows["plain_report"]
        k = first_rows["distilled_report"]
        print("\nNumber  G-Ghost  DKD  Params (M)  Top-1 (%)")
        print(f"1       x        x    {teacher_report.params / 1e6:10.2f}  "
              f"{100 * teacher_report.top1:9.2f}")
        print(f"2       +        x    {p.params / 1e6:10.2f}  {100 * p.top1:9.2f}")
        print(f"3       +        +    {k.params / 1e6:10.2f}  {100 * k.top1:9.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
