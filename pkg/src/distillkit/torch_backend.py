"""Compile layer graphs into executable torch modules.

The graph stays the source of truth: the compiled module holds one torch
layer per parameterful node and replays the DAG functionally. Weight
initialization is driven by an explicit, per-module generator in
topological node order, so two compilations from the same (graph, seed)
produce bit-identical parameters regardless of global RNG state.
"""
from __future__ import annotations

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn

from .graph import LayerGraph


class GraphModule(nn.Module):
    """Executable form of a ``LayerGraph``. Input is NCHW; output is the
    raw logit matrix (the ``softmax_head`` marker is identity)."""

    def __init__(self, graph: LayerGraph, seed: int = 0):
        super().__init__()
        graph.validate()
        self.graph = graph
        self._order = graph.topological_order()
        self._input_id = graph.input_node().id
        self._output_id = graph.output_node().id

        layers: dict[str, nn.Module] = {}
        for node in self._order:
            p = node.params
            if node.kind == "conv2d":
                layers[node.id] = nn.Conv2d(
                    p["in_channels"], p["out_channels"], p["kernel"],
                    stride=p["stride"], padding=p["padding"], bias=True)
            elif node.kind == "depthwise_conv2d":
                layers[node.id] = nn.Conv2d(
                    p["channels"], p["channels"], p["kernel"],
                    stride=p["stride"], padding=p["padding"],
                    groups=p["channels"], bias=True)
            elif node.kind == "pointwise_conv2d":
                layers[node.id] = nn.Conv2d(
                    p["in_channels"], p["out_channels"], 1, bias=True)
            elif node.kind == "linear":
                layers[node.id] = nn.Linear(p["in_features"], p["out_features"], bias=True)
            elif node.kind == "batchnorm":
                layers[node.id] = nn.BatchNorm2d(p["channels"])
        self.layers = nn.ModuleDict(layers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for node in self._order:
                if node.id not in self.layers:
                    continue
                layer = self.layers[node.id]
                if isinstance(layer, nn.BatchNorm2d):
                    layer.weight.fill_(1.0)
                    layer.bias.zero_()
                    layer.reset_running_stats()
                else:
                    fan_in = layer.weight[0].numel()
                    layer.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                    layer.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cache: dict[str, torch.Tensor] = {}
        for node in self._order:
            if node.kind == "input":
                cache[node.id] = x
                continue
            srcs = [cache[s] for s in node.inputs]
            kind = node.kind
            if kind in ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "batchnorm"):
                out = self.layers[node.id](srcs[0])
            elif kind == "linear":
                out = self.layers[node.id](srcs[0].flatten(1))
            elif kind == "relu":
                out = F.relu(srcs[0])
            elif kind == "maxpool":
                out = F.max_pool2d(srcs[0], node.params["kernel"], node.params["stride"])
            elif kind == "avgpool_global":
                out = F.adaptive_avg_pool2d(srcs[0], 1)
            elif kind == "concat":
                out = torch.cat(srcs, dim=1)
            elif kind == "add":
                out = srcs[0]
                for extra in srcs[1:]:
                    out = out + extra
            elif kind == "softmax_head":
                out = srcs[0]
            else:  # unreachable: graph.validate() rejects unknown kinds
                raise RuntimeError(f"unsupported kind {kind!r}")
            cache[node.id] = out
        return cache[self._output_id]

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(decayed, undecayed) parameters: weight decay applies to conv and
        linear weights only, never to biases or batchnorm terms."""
        decay: list[nn.Parameter] = []
        rest: list[nn.Parameter] = []
        for node in self._order:
            if node.id not in self.layers:
                continue
            layer = self.layers[node.id]
            if isinstance(layer, nn.BatchNorm2d):
                rest.extend([layer.weight, layer.bias])
            else:
                decay.append(layer.weight)
                rest.append(layer.bias)
        return decay, rest


def compile_graph(graph: LayerGraph, seed: int = 0) -> GraphModule:
    return GraphModule(graph, seed=seed)


def state_digest(module: nn.Module) -> str:
    """Stable fingerprint of every parameter and buffer byte; used to prove
    a model was not touched by training."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
