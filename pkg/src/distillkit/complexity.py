"""Parameter and multiply-accumulate accounting over layer graphs.

Counting conventions
--------------------
* Parameters: conv ``k*k*Cin*Cout + Cout``, depthwise ``k*k*C + C``,
  pointwise ``Cin*Cout + Cout``, linear ``in*out + out``, batchnorm ``2C``;
  everything else is parameterless.
* Compute: multiply-accumulates (MACs). Conv ``k*k*Cin*Cout*Hout*Wout``,
  linear ``in*out``; activations, pooling, batchnorm, concat and add count
  as zero. Reports label the MAC totals "FLOPs" because that is how the
  lightweight-CNN literature tabulates them; the header of every rendered
  report repeats this convention.

The symbolic side (``reduction_ratios``) evaluates the ghost-stage cost
model: a stage of ``n`` blocks with per-block costs ``c_i`` and ghost ratio
``lam`` keeps block 1 at full cost, block 2 at ``(1-lam)`` of its cost,
blocks 3..n at ``(1-lam)^2``, and pays a mix-path overhead on top. The
ratio of the plain stage cost to that reduced cost is the predicted
saving. ``crosscheck_stage`` builds both stages and verifies the
prediction against exact counts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph import LayerGraph

MAC_CONVENTION = "FLOPs column reports multiply-accumulates (MACs); conv/linear only"


class AnalysisError(ValueError):
    """Graph cannot be analyzed (unknown kind, spatial underflow, ...)."""


@dataclass(frozen=True)
class StageCostSymbols:
    """Per-block costs feeding the symbolic stage-reduction formula."""

    f: list[float]          # per-block compute cost
    p: list[float]          # per-block parameter cost
    lam: float              # ghost ratio in [0, 1)
    f_mix: float = 0.0      # compute overhead of the ghost/mix path
    p_mix: float = 0.0      # parameter overhead of the ghost/mix path

    def __post_init__(self):
        if len(self.f) != len(self.p):
            raise ValueError(f"f and p must have equal length, got {len(self.f)} vs {len(self.p)}")
        if len(self.f) < 2:
            raise ValueError(f"stage needs at least 2 blocks, got {len(self.f)}")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"ghost ratio must be in [0, 1), got {self.lam}")
        if any(c < 0 for c in self.f) or any(c < 0 for c in self.p):
            raise ValueError("block costs must be nonnegative")
        if self.f_mix < 0 or self.p_mix < 0:
            raise ValueError("mix costs must be nonnegative")


def _reduced_cost(costs: list[float], lam: float, mix: float) -> float:
    keep = 1.0 - lam
    total = costs[0] + keep * costs[1] + keep * keep * sum(costs[2:]) + mix
    return total


def reduction_ratios(sym: StageCostSymbols) -> tuple[float, float]:
    """Predicted (compute, parameter) reduction ratios of a ghost stage.

    Both ratios are ``sum(costs) / reduced cost``; they are >= 1 whenever
    the mix overhead does not exceed the savings, and exactly 1 at
    ``lam == 0`` with zero mix cost.
    """
    denom_f = _reduced_cost(sym.f, sym.lam, sym.f_mix)
    denom_p = _reduced_cost(sym.p, sym.lam, sym.p_mix)
    if denom_f <= 0 or denom_p <= 0:
        raise ValueError("reduced stage cost must be positive")
    return sum(sym.f) / denom_f, sum(sym.p) / denom_p


# -- exact counting ---------------------------------------------------------

def _node_params(kind: str, p: dict[str, int]) -> int:
    if kind == "conv2d":
        return p["kernel"] * p["kernel"] * p["in_channels"] * p["out_channels"] + p["out_channels"]
    if kind == "depthwise_conv2d":
        return p["kernel"] * p["kernel"] * p["channels"] + p["channels"]
    if kind == "pointwise_conv2d":
        return p["in_channels"] * p["out_channels"] + p["out_channels"]
    if kind == "linear":
        return p["in_features"] * p["out_features"] + p["out_features"]
    if kind == "batchnorm":
        return 2 * p["channels"]
    return 0


def propagate_shapes(graph: LayerGraph, input_hw: tuple[int, int]) -> dict[str, tuple[int, int, int]]:
    """(channels, H, W) produced by every node; validates spatial arithmetic."""
    h0, w0 = input_hw
    if h0 <= 0 or w0 <= 0:
        raise AnalysisError(f"input size must be positive, got {input_hw}")
    graph.validate()
    shapes: dict[str, tuple[int, int, int]] = {}
    for node in graph.topological_order():
        kind, p = node.kind, node.params
        srcs = [shapes[s] for s in node.inputs]
        if kind == "input":
            shapes[node.id] = (p["channels"], h0, w0)
        elif kind == "conv2d":
            _, h, w = srcs[0]
            ho = (h + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            wo = (w + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            if ho <= 0 or wo <= 0:
                raise AnalysisError(f"node {node.id!r}: spatial underflow ({h}x{w} -> {ho}x{wo})")
            shapes[node.id] = (p["out_channels"], ho, wo)
        elif kind == "depthwise_conv2d":
            _, h, w = srcs[0]
            ho = (h + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            wo = (w + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            if ho <= 0 or wo <= 0:
                raise AnalysisError(f"node {node.id!r}: spatial underflow ({h}x{w} -> {ho}x{wo})")
            shapes[node.id] = (p["channels"], ho, wo)
        elif kind == "pointwise_conv2d":
            _, h, w = srcs[0]
            shapes[node.id] = (p["out_channels"], h, w)
        elif kind == "maxpool":
            c, h, w = srcs[0]
            ho = (h - p["kernel"]) // p["stride"] + 1
            wo = (w - p["kernel"]) // p["stride"] + 1
            if ho <= 0 or wo <= 0:
                raise AnalysisError(f"node {node.id!r}: spatial underflow ({h}x{w} -> {ho}x{wo})")
            shapes[node.id] = (c, ho, wo)
        elif kind == "avgpool_global":
            c, _, _ = srcs[0]
            shapes[node.id] = (c, 1, 1)
        elif kind == "linear":
            c, h, w = srcs[0]
            if c * h * w != p["in_features"]:
                raise AnalysisError(
                    f"node {node.id!r}: in_features={p['in_features']} but upstream "
                    f"flattens to {c * h * w} ({c}x{h}x{w})"
                )
            shapes[node.id] = (p["out_features"], 1, 1)
        elif kind == "concat":
            hw = {(h, w) for _, h, w in srcs}
            if len(hw) != 1:
                raise AnalysisError(f"node {node.id!r}: concat inputs disagree spatially: {srcs}")
            shapes[node.id] = (sum(c for c, _, _ in srcs), *hw.pop())
        elif kind == "add":
            # equal spatial extents, or broadcast from 1x1
            spatial = {(h, w) for _, h, w in srcs}
            big = {s for s in spatial if s != (1, 1)}
            if len(big) > 1:
                raise AnalysisError(f"node {node.id!r}: add inputs disagree spatially: {srcs}")
            h, w = big.pop() if big else (1, 1)
            shapes[node.id] = (srcs[0][0], h, w)
        else:  # relu, batchnorm, softmax_head
            shapes[node.id] = srcs[0]
    return shapes


def _node_macs(kind: str, p: dict[str, int], out_shape: tuple[int, int, int]) -> int:
    _, ho, wo = out_shape
    if kind == "conv2d":
        return p["kernel"] * p["kernel"] * p["in_channels"] * p["out_channels"] * ho * wo
    if kind == "depthwise_conv2d":
        return p["kernel"] * p["kernel"] * p["channels"] * ho * wo
    if kind == "pointwise_conv2d":
        return p["in_channels"] * p["out_channels"] * ho * wo
    if kind == "linear":
        return p["in_features"] * p["out_features"]
    return 0


def count_params(graph: LayerGraph) -> int:
    graph.validate()
    return sum(_node_params(n.kind, n.params) for n in graph.nodes)


def count_macs(graph: LayerGraph, input_hw: tuple[int, int]) -> int:
    shapes = propagate_shapes(graph, input_hw)
    return sum(_node_macs(n.kind, n.params, shapes[n.id]) for n in graph.nodes)


@dataclass
class ComplexityReport:
    total_params: int
    total_macs: int
    per_layer: list[tuple[str, int, int]]   # (node id, params, macs)
    r_f: float | None = None                # filled by stage crosschecks
    r_p: float | None = None
    convention: str = MAC_CONVENTION

    def to_json(self) -> str:
        return json.dumps({
            "convention": self.convention,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "r_f": self.r_f,
            "r_p": self.r_p,
            "per_layer": [
                {"id": nid, "params": p, "macs": m} for nid, p, m in self.per_layer
            ],
        }, indent=2)

    def render(self) -> str:
        width = max([len("layer")] + [len(nid) for nid, _, _ in self.per_layer])
        lines = [f"# {self.convention}"]
        lines.append(f"{'layer':<{width}}  {'params':>12}  {'flops':>14}")
        for nid, p, m in self.per_layer:
            lines.append(f"{nid:<{width}}  {p:>12}  {m:>14}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12}  {self.total_macs:>14}")
        lines.append(
            f"params (M): {self.total_params / 1e6:.2f}   flops (M): {self.total_macs / 1e6:.2f}"
        )
        if self.r_f is not None and self.r_p is not None:
            lines.append(f"reduction ratios: r_f={self.r_f:.4f}  r_p={self.r_p:.4f}")
        return "\n".join(lines) + "\n"


def analyze_graph(graph: LayerGraph, input_hw: tuple[int, int]) -> ComplexityReport:
    shapes = propagate_shapes(graph, input_hw)
    per_layer = [
        (n.id, _node_params(n.kind, n.params), _node_macs(n.kind, n.params, shapes[n.id]))
        for n in graph.nodes
    ]
    return ComplexityReport(
        total_params=sum(p for _, p, _ in per_layer),
        total_macs=sum(m for _, _, m in per_layer),
        per_layer=per_layer,
    )


# -- symbolic vs empirical crosscheck ---------------------------------------

@dataclass
class StageCrosscheck:
    spec_lam: float
    n_blocks: int
    plain_params: int
    plain_macs: int
    ghost_params: int
    ghost_macs: int
    empirical_r_p: float
    empirical_r_f: float
    symbolic_r_p: float
    symbolic_r_f: float
    tolerance: float
    within_tolerance: bool
    flagged: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [
            f"ghost stage crosscheck (n={self.n_blocks}, lam={self.spec_lam})",
            f"  plain  stage: params={self.plain_params}  macs={self.plain_macs}",
            f"  ghost  stage: params={self.ghost_params}  macs={self.ghost_macs}",
            f"  empirical ratios: r_p={self.empirical_r_p:.4f}  r_f={self.empirical_r_f:.4f}",
            f"  symbolic  ratios: r_p={self.symbolic_r_p:.4f}  r_f={self.symbolic_r_f:.4f}",
            f"  tolerance: {self.tolerance:.2%}  ->  {'OK' if self.within_tolerance else 'DIVERGED'}",
        ]
        lines.extend(f"  flag: {msg}" for msg in self.flagged)
        return "\n".join(lines) + "\n"


def _group_costs(graph: LayerGraph, shapes, prefixes: list[str]) -> tuple[list[int], list[int]]:
    """Sum node costs by id prefix; returns (macs per group, params per group)."""
    macs = [0] * len(prefixes)
    params = [0] * len(prefixes)
    for node in graph.nodes:
        for i, prefix in enumerate(prefixes):
            if node.id.startswith(prefix):
                params[i] += _node_params(node.kind, node.params)
                macs[i] += _node_macs(node.kind, node.params, shapes[node.id])
                break
    return macs, params


def crosscheck_stage(spec, input_hw: tuple[int, int], tolerance: float = 0.05) -> StageCrosscheck:
    """Build a ghost stage and its plain twin, count both, and compare the
    empirical reduction ratios to the symbolic prediction fed with per-block
    costs measured from the plain stage and the ghost/mix overhead measured
    from the ghost stage."""
    from . import backbone  # local import keeps module layering acyclic

    ghost_graph = backbone.build_gghost_stage(spec)
    plain_graph = backbone.build_gghost_stage(spec.plain())

    ghost_shapes = propagate_shapes(ghost_graph, input_hw)
    plain_shapes = propagate_shapes(plain_graph, input_hw)

    plain_params = count_params(plain_graph)
    plain_macs = count_macs(plain_graph, input_hw)
    ghost_params = count_params(ghost_graph)
    ghost_macs = count_macs(ghost_graph, input_hw)

    block_prefixes = [f"block{i}_" for i in range(1, spec.n + 1)]
    block_macs, block_params = _group_costs(plain_graph, plain_shapes, block_prefixes)
    mix_macs, mix_params = _group_costs(ghost_graph, ghost_shapes, ["ghost_", "mix_"])

    sym = StageCostSymbols(
        f=[float(c) for c in block_macs],
        p=[float(c) for c in block_params],
        lam=spec.ghost_ratio,
        f_mix=float(sum(mix_macs)),
        p_mix=float(sum(mix_params)),
    )
    symbolic_r_f, symbolic_r_p = reduction_ratios(sym)
    empirical_r_p = plain_params / ghost_params
    empirical_r_f = plain_macs / ghost_macs

    rel_p = abs(empirical_r_p - symbolic_r_p) / symbolic_r_p
    rel_f = abs(empirical_r_f - symbolic_r_f) / symbolic_r_f
    flagged = []
    if rel_p > tolerance:
        flagged.append(f"parameter ratio diverges: empirical {empirical_r_p:.4f} vs "
                       f"symbolic {symbolic_r_p:.4f} ({rel_p:.2%})")
    if rel_f > tolerance:
        flagged.append(f"compute ratio diverges: empirical {empirical_r_f:.4f} vs "
                       f"symbolic {symbolic_r_f:.4f} ({rel_f:.2%})")

    return StageCrosscheck(
        spec_lam=spec.ghost_ratio,
        n_blocks=spec.n,
        plain_params=plain_params,
        plain_macs=plain_macs,
        ghost_params=ghost_params,
        ghost_macs=ghost_macs,
        empirical_r_p=empirical_r_p,
        empirical_r_f=empirical_r_f,
        symbolic_r_p=symbolic_r_p,
        symbolic_r_f=symbolic_r_f,
        tolerance=tolerance,
        within_tolerance=not flagged,
        flagged=flagged,
    )
