"""Backend-neutral layer graphs.

A ``LayerGraph`` is a small DAG of typed layer nodes. It is the shared
currency between the backbone builders, the complexity analyzer and the
training backend: builders emit graphs, the analyzer counts them, and the
torch backend compiles them into executable modules.

Conventions baked into the node vocabulary:

* every conv / linear node carries a bias term (the analyzer's closed-form
  counts assume it, and the executor materializes it);
* ``softmax_head`` is an output marker: it is parameterless and the
  executor treats it as identity so that graphs emit raw logits;
* ``add`` requires equal channel counts on all inputs but tolerates
  spatial broadcasting (a 1x1 map may be added to an HxW map).

Graphs serialize to a one-node-per-line text format (see ``serialize``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class GraphError(ValueError):
    """Structural problem while building or validating a graph."""


class GraphParseError(GraphError):
    """Malformed serialized graph; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# Integer parameters each node kind must carry, in serialization order.
PARAM_KEYS: dict[str, tuple[str, ...]] = {
    "input": ("channels",),
    "conv2d": ("in_channels", "out_channels", "kernel", "stride", "padding"),
    "depthwise_conv2d": ("channels", "kernel", "stride", "padding"),
    "pointwise_conv2d": ("in_channels", "out_channels"),
    "linear": ("in_features", "out_features"),
    "batchnorm": ("channels",),
    "relu": (),
    "maxpool": ("kernel", "stride"),
    "avgpool_global": (),
    "concat": (),
    "add": (),
    "softmax_head": (),
}

# Kinds that take exactly one upstream node.
_UNARY = {
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "linear",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool_global",
    "softmax_head",
}

FORMAT_HEADER = "# layergraph v1"


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    params: dict[str, int] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in PARAM_KEYS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        if not self.id or any(ch.isspace() for ch in self.id) or "." in self.id:
            raise GraphError(f"invalid node id {self.id!r} (no whitespace or dots)")
        want = PARAM_KEYS[self.kind]
        if set(self.params) != set(want):
            raise GraphError(
                f"node {self.id!r} ({self.kind}): expected params {sorted(want)}, "
                f"got {sorted(self.params)}"
            )
        for key, val in self.params.items():
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise GraphError(f"node {self.id!r}: param {key}={val!r} must be a nonnegative int")
        object.__setattr__(self, "inputs", tuple(self.inputs))


class LayerGraph:
    """Ordered collection of ``LayerNode`` forming a single-input DAG."""

    def __init__(self, nodes: list[LayerNode] | None = None):
        self.nodes: list[LayerNode] = []
        self._by_id: dict[str, LayerNode] = {}
        for node in nodes or []:
            self.add(node)

    def add(self, node: LayerNode) -> LayerNode:
        if node.id in self._by_id:
            raise GraphError(f"duplicate node id {node.id!r}")
        for src in node.inputs:
            if src not in self._by_id:
                raise GraphError(f"node {node.id!r} references unknown input {src!r}")
        self.nodes.append(node)
        self._by_id[node.id] = node
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __getitem__(self, node_id: str) -> LayerNode:
        return self._by_id[node_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, LayerGraph) and self.nodes == other.nodes

    # -- structure ---------------------------------------------------------

    def topological_order(self) -> list[LayerNode]:
        """Insertion order is already topological because ``add`` rejects
        forward references; this re-checks and returns it."""
        seen: set[str] = set()
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.id!r} consumes {src!r} before it is defined")
            seen.add(node.id)
        return list(self.nodes)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {node.id: [] for node in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                out[src].append(node.id)
        return out

    def input_node(self) -> LayerNode:
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise GraphError(f"graph must have exactly one input node, found {len(inputs)}")
        return inputs[0]

    def output_node(self) -> LayerNode:
        sinks = [n for n in self.nodes if not self.consumers()[n.id]]
        if len(sinks) != 1:
            raise GraphError(
                f"graph must have exactly one output node, found {[n.id for n in sinks]}"
            )
        return sinks[0]

    def out_channels(self) -> dict[str, int]:
        """Channel count produced by every node; validates channel arithmetic.

        ``linear`` output is reported as its feature count; exact
        ``in_features`` validation needs spatial extents and happens during
        shape propagation in the analyzer / executor.
        """
        channels: dict[str, int] = {}
        for node in self.nodes:
            srcs = [channels[s] for s in node.inputs]
            kind, p = node.kind, node.params
            if kind == "input":
                if node.inputs:
                    raise GraphError(f"input node {node.id!r} cannot have inputs")
                channels[node.id] = p["channels"]
                continue
            if kind in _UNARY and len(node.inputs) != 1:
                raise GraphError(f"node {node.id!r} ({kind}) needs exactly one input")
            if kind in ("concat", "add") and len(node.inputs) < 2:
                raise GraphError(f"node {node.id!r} ({kind}) needs at least two inputs")
            if kind == "conv2d":
                if srcs[0] != p["in_channels"]:
                    raise GraphError(
                        f"node {node.id!r}: in_channels={p['in_channels']} but "
                        f"upstream provides {srcs[0]}"
                    )
                channels[node.id] = p["out_channels"]
            elif kind == "depthwise_conv2d":
                if srcs[0] != p["channels"]:
                    raise GraphError(
                        f"node {node.id!r}: channels={p['channels']} but upstream provides {srcs[0]}"
                    )
                channels[node.id] = p["channels"]
            elif kind == "pointwise_conv2d":
                if srcs[0] != p["in_channels"]:
                    raise GraphError(
                        f"node {node.id!r}: in_channels={p['in_channels']} but "
                        f"upstream provides {srcs[0]}"
                    )
                channels[node.id] = p["out_channels"]
            elif kind == "batchnorm":
                if srcs[0] != p["channels"]:
                    raise GraphError(
                        f"node {node.id!r}: channels={p['channels']} but upstream provides {srcs[0]}"
                    )
                channels[node.id] = p["channels"]
            elif kind == "linear":
                channels[node.id] = p["out_features"]
            elif kind == "concat":
                channels[node.id] = sum(srcs)
            elif kind == "add":
                if len(set(srcs)) != 1:
                    raise GraphError(
                        f"node {node.id!r}: add requires equal channels, got {srcs}"
                    )
                channels[node.id] = srcs[0]
            else:  # relu, maxpool, avgpool_global, softmax_head
                channels[node.id] = srcs[0]
        return channels

    def validate(self) -> None:
        self.topological_order()
        self.input_node()
        self.output_node()
        self.out_channels()

    # -- serialization -----------------------------------------------------

    def serialize(self) -> str:
        lines = [FORMAT_HEADER]
        for node in self.nodes:
            params = ",".join(f"{k}={node.params[k]}" for k in PARAM_KEYS[node.kind]) or "-"
            inputs = ",".join(node.inputs) or "-"
            lines.append(f"{node.id} {node.kind} {params} <- {inputs}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "LayerGraph":
        lines = text.splitlines()
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise GraphParseError(f"expected header {FORMAT_HEADER!r}", line=1)
        graph = cls()
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5 or parts[3] != "<-":
                raise GraphParseError(
                    "expected '<id> <kind> <k=v,...|-> <- <inputs|->'", line=lineno
                )
            node_id, kind, param_field, _, input_field = parts
            params: dict[str, int] = {}
            if param_field != "-":
                for item in param_field.split(","):
                    if "=" not in item:
                        raise GraphParseError(f"bad param {item!r}", line=lineno)
                    key, _, val = item.partition("=")
                    try:
                        params[key] = int(val)
                    except ValueError:
                        raise GraphParseError(
                            f"param {key!r} has non-integer value {val!r}", line=lineno
                        ) from None
            inputs = tuple(input_field.split(",")) if input_field != "-" else ()
            try:
                graph.add(LayerNode(id=node_id, kind=kind, params=params, inputs=inputs))
            except GraphError as exc:
                raise GraphParseError(str(exc), line=lineno) from exc
        return graph

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize())

    @classmethod
    def load(cls, path: str | Path) -> "LayerGraph":
        return cls.parse(Path(path).read_text())


class GraphBuilder:
    """Incremental construction helper with readable, deterministic ids."""

    def __init__(self, graph: LayerGraph | None = None):
        self.graph = graph or LayerGraph()

    def add(self, name: str, kind: str, params: dict[str, int] | None = None,
            inputs: tuple[str, ...] | list[str] = ()) -> str:
        node = LayerNode(id=name, kind=kind, params=dict(params or {}), inputs=tuple(inputs))
        self.graph.add(node)
        return node.id

    def input(self, name: str, channels: int) -> str:
        return self.add(name, "input", {"channels": channels})

    def conv(self, name: str, src: str, cin: int, cout: int,
             kernel: int = 3, stride: int = 1, padding: int = 1) -> str:
        return self.add(name, "conv2d", {
            "in_channels": cin, "out_channels": cout,
            "kernel": kernel, "stride": stride, "padding": padding,
        }, (src,))

    def bn(self, name: str, src: str, channels: int) -> str:
        return self.add(name, "batchnorm", {"channels": channels}, (src,))

    def relu(self, name: str, src: str) -> str:
        return self.add(name, "relu", {}, (src,))
