"""Classifier backbones expressed as layer graphs.

The student is a stack of ghost stages: block 1 of a stage runs at full
width, blocks 2..n run at ``(1 - ghost_ratio)`` width, and a cheap branch
(pointwise + depthwise pair on block-1 output) supplies the remaining
channels. An optional mix path feeds a globally pooled complex-branch
feature back into the cheap branch. Concatenating both branches restores
the stage's full output width, so the stage drops in wherever a plain
n-block stage would.

The teacher is a VGG-16-shaped conv stack with a global-average-pool head
and a width multiplier; at width 1.0 its parameter count sits at 14.7M.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .graph import GraphBuilder, GraphError, LayerGraph

BLOCK_TEMPLATES = ("conv_bn_relu_residual",)

# VGG-16 conv plan: channel widths with 'M' marking 2x2 stride-2 max pools.
_VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
               512, 512, 512, "M", 512, 512, 512, "M")


@dataclass(frozen=True)
class GGhostStageSpec:
    """One ghost stage: n blocks, a cheap branch covering ``ghost_ratio``
    of the output channels, and an optional mix path."""

    n: int
    ghost_ratio: float
    in_channels: int
    out_channels: int
    stride: int = 1
    block_template: str = "conv_bn_relu_residual"
    mix_enabled: bool = True

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"stage needs at least 2 blocks, got n={self.n}")
        if not 0.0 <= self.ghost_ratio < 1.0:
            raise ValueError(f"ghost_ratio must be in [0, 1), got {self.ghost_ratio}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.block_template not in BLOCK_TEMPLATES:
            raise ValueError(f"unknown block template {self.block_template!r}")

    @property
    def complex_channels(self) -> int:
        return math.ceil((1.0 - self.ghost_ratio) * self.out_channels)

    @property
    def ghost_channels(self) -> int:
        return self.out_channels - self.complex_channels

    def plain(self) -> "GGhostStageSpec":
        """The ghost-free twin: same blocks, full width, no cheap branch."""
        return replace(self, ghost_ratio=0.0, mix_enabled=False)


@dataclass(frozen=True)
class StageSettings:
    """Stage shape as it appears in configs; in_channels chains implicitly."""

    out_channels: int
    blocks: int = 2
    ghost_ratio: float = 0.5
    stride: int = 2
    mix_enabled: bool = True


@dataclass(frozen=True)
class StudentConfig:
    num_classes: int = 4
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple[StageSettings, ...] = (
        StageSettings(out_channels=40, blocks=2, ghost_ratio=0.4),
        StageSettings(out_channels=80, blocks=3, ghost_ratio=0.4),
        StageSettings(out_channels=160, blocks=5, ghost_ratio=0.4),
        StageSettings(out_channels=320, blocks=4, ghost_ratio=0.4),
    )

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not self.stages:
            raise ValueError("student needs at least one stage")


@dataclass(frozen=True)
class TeacherConfig:
    num_classes: int = 4
    in_channels: int = 3
    width: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.width <= 0:
            raise ValueError(f"width multiplier must be positive, got {self.width}")


def _emit_block(b: GraphBuilder, prefix: str, src: str, cin: int, cout: int,
                stride: int) -> str:
    """conv-bn-relu block with a residual add when shapes permit."""
    conv = b.conv(f"{prefix}conv", src, cin, cout, kernel=3, stride=stride, padding=1)
    bn = b.bn(f"{prefix}bn", conv, cout)
    if cin == cout and stride == 1:
        bn = b.add(f"{prefix}add", "add", {}, (bn, src))
    return b.relu(f"{prefix}relu", bn)


def emit_gghost_stage(b: GraphBuilder, spec: GGhostStageSpec, src: str,
                      prefix: str = "") -> str:
    """Append one ghost stage to the builder; returns the stage output id."""
    cpx = spec.complex_channels
    g = spec.ghost_channels
    if spec.ghost_ratio > 0.0 and g == 0:
        raise GraphError(
            f"ghost_ratio={spec.ghost_ratio} rounds the cheap branch of a "
            f"{spec.out_channels}-channel stage to 0 channels"
        )

    # Block 1 always runs at full output width and carries the stage stride.
    block1 = _emit_block(b, f"{prefix}block1_", src, spec.in_channels,
                         spec.out_channels, spec.stride)

    outs = [block1]
    prev, prev_ch = block1, spec.out_channels
    for i in range(2, spec.n + 1):
        prev = _emit_block(b, f"{prefix}block{i}_", prev, prev_ch, cpx, stride=1)
        prev_ch = cpx
        outs.append(prev)

    if g == 0:
        return prev

    ghost = b.add(f"{prefix}ghost_pw", "pointwise_conv2d",
                  {"in_channels": spec.out_channels, "out_channels": g}, (block1,))
    ghost = b.add(f"{prefix}ghost_dw", "depthwise_conv2d",
                  {"channels": g, "kernel": 3, "stride": 1, "padding": 1}, (ghost,))
    if spec.mix_enabled:
        mix_src = outs[spec.n - 2]  # penultimate complex block
        mix_ch = spec.out_channels if spec.n == 2 else cpx
        gap = b.add(f"{prefix}mix_gap", "avgpool_global", {}, (mix_src,))
        mix = b.add(f"{prefix}mix_pw", "pointwise_conv2d",
                    {"in_channels": mix_ch, "out_channels": g}, (gap,))
        ghost = b.add(f"{prefix}mix_add", "add", {}, (ghost, mix))
    ghost = b.relu(f"{prefix}ghost_relu", ghost)

    return b.add(f"{prefix}concat", "concat", {}, (prev, ghost))


def build_gghost_stage(spec: GGhostStageSpec) -> LayerGraph:
    """Standalone stage graph (own input node), mainly for analysis."""
    b = GraphBuilder()
    src = b.input("stage_in", spec.in_channels)
    emit_gghost_stage(b, spec, src)
    b.graph.validate()
    return b.graph


def build_student(config: StudentConfig) -> LayerGraph:
    b = GraphBuilder()
    src = b.input("image", config.in_channels)
    src = b.conv("stem_conv", src, config.in_channels, config.stem_channels,
                 kernel=3, stride=2, padding=1)
    src = b.bn("stem_bn", src, config.stem_channels)
    src = b.relu("stem_relu", src)

    cin = config.stem_channels
    for idx, st in enumerate(config.stages, start=1):
        spec = GGhostStageSpec(
            n=st.blocks,
            ghost_ratio=st.ghost_ratio,
            in_channels=cin,
            out_channels=st.out_channels,
            stride=st.stride,
            mix_enabled=st.mix_enabled,
        )
        src = emit_gghost_stage(b, spec, src, prefix=f"stage{idx}_")
        cin = st.out_channels

    src = b.add("pool", "avgpool_global", {}, (src,))
    src = b.add("classifier", "linear",
                {"in_features": cin, "out_features": config.num_classes}, (src,))
    b.add("head", "softmax_head", {}, (src,))
    b.graph.validate()
    return b.graph


def build_teacher(config: TeacherConfig) -> LayerGraph:
    b = GraphBuilder()
    src = b.input("image", config.in_channels)
    cin = config.in_channels
    conv_idx = 0
    pool_idx = 0
    for entry in _VGG16_PLAN:
        if entry == "M":
            pool_idx += 1
            src = b.add(f"pool{pool_idx}", "maxpool", {"kernel": 2, "stride": 2}, (src,))
            continue
        conv_idx += 1
        cout = max(1, int(round(entry * config.width)))
        src = b.conv(f"conv{conv_idx}", src, cin, cout, kernel=3, stride=1, padding=1)
        src = b.bn(f"bn{conv_idx}", src, cout)
        src = b.relu(f"relu{conv_idx}", src)
        cin = cout

    src = b.add("pool_global", "avgpool_global", {}, (src,))
    src = b.add("classifier", "linear",
                {"in_features": cin, "out_features": config.num_classes}, (src,))
    b.add("head", "softmax_head", {}, (src,))
    b.graph.validate()
    return b.graph


def desk_student_config(num_classes: int = 4) -> StudentConfig:
    """Tiny student for 32x32 desk-scale runs."""
    return StudentConfig(
        num_classes=num_classes,
        stem_channels=8,
        stages=(
            StageSettings(out_channels=16, blocks=2, ghost_ratio=0.25, stride=2),
            StageSettings(out_channels=32, blocks=3, ghost_ratio=0.5, stride=2),
        ),
    )


def desk_teacher_config(num_classes: int = 4) -> TeacherConfig:
    """Slim teacher for 32x32 desk-scale runs."""
    return TeacherConfig(num_classes=num_classes, width=0.25)
