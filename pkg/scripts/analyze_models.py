#!/usr/bin/env python3
"""Complexity summary of the default teacher and student, plus the
ghost-stage crosscheck grid (symbolic cost model vs counted graphs)."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from distillkit.backbone import (
    GGhostStageSpec,
    StudentConfig,
    TeacherConfig,
    build_student,
    build_teacher,
)
from distillkit.complexity import analyze_graph, crosscheck_stage


def main() -> int:
    teacher = build_teacher(TeacherConfig(num_classes=4, width=1.0))
    student = build_student(StudentConfig(num_classes=4))

    for name, graph in (("teacher (width 1.0)", teacher), ("student (default)", student)):
        for hw in ((224, 224), (32, 32)):
            report = analyze_graph(graph, hw)
            print(f"{name} @ {hw[0]}x{hw[1]}: params {report.total_params / 1e6:.2f}M, "
                  f"flops {report.total_macs / 1e6:.2f}M (MAC convention)")
        print()

    print("ghost-stage crosscheck grid (64-channel equal-cost blocks):")
    for n in (2, 3, 4, 6):
        for lam in (0.0, 0.25, 0.5, 0.75):
            spec = GGhostStageSpec(n=n, ghost_ratio=lam, in_channels=64,
                                   out_channels=64, stride=1, mix_enabled=lam > 0)
            r = crosscheck_stage(spec, (32, 32))
            print(f"  n={n} ratio={lam:<4}: empirical r_p={r.empirical_r_p:.4f} "
                  f"r_f={r.empirical_r_f:.4f} | symbolic r_p={r.symbolic_r_p:.4f} "
                  f"r_f={r.symbolic_r_f:.4f} | {'ok' if r.within_tolerance else 'DIVERGED'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
