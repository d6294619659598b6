"""Static cost analysis: parameters, FLOPs, output stride and receptive field.

FLOP convention: a multiply-add counts as 2 FLOPs. Convolutions cost
``2 * kh * kw * Cin * Cout * Hout * Wout`` (``Cin`` replaced by 1 for
depthwise). Batch norm, activation, add, resize and pooling cost 2 FLOPs per
output element; concat and the input node are free. Parameters are conv
kernels, conv biases and batch-norm scale/offset; running statistics are not
trainable and are excluded.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Optional

from .archspec import ModelSpec, named_model, serialize_spec
from .graph import ComputeGraph, GraphError, Node, build_graph, check_input_size

FLOP_CONVENTION = "FLOPs = 2 x multiply-adds; elementwise ops (bn, act, add, resize, pool) = 2 per output element"

_ELEMENTWISE = {"batchnorm", "activation", "add", "resize_nearest", "resize_bilinear", "max_pool", "global_avg_pool"}


def node_params(graph: ComputeGraph, node: Node) -> int:
    total = 0
    for slot in node.weights:
        kind = slot.rsplit("/", 1)[1]
        if kind in ("mean", "var"):
            continue
        total += math.prod(graph.weight_slots[slot])
    return total


def count_params(graph: ComputeGraph) -> int:
    return sum(node_params(graph, n) for n in graph.nodes)


def node_flops(graph: ComputeGraph, node: Node) -> int:
    h, w, c = node.shape
    if node.op == "conv2d":
        kh, kw, cin, cout = graph.weight_slots[node.weights[0]]
        return 2 * kh * kw * cin * cout * h * w
    if node.op == "depthwise_conv2d":
        kh, kw, ch, _ = graph.weight_slots[node.weights[0]]
        return 2 * kh * kw * ch * h * w
    if node.op in _ELEMENTWISE:
        return 2 * h * w * c
    return 0


def _graph_at(graph_or_spec, input_hw):
    if isinstance(graph_or_spec, ModelSpec):
        return build_graph(graph_or_spec, input_hw)
    return graph_or_spec


def count_flops(graph, input_hw: Optional[tuple[int, int]] = None) -> int:
    """FLOPs of ``graph`` at its build resolution.

    ``graph`` may also be a ModelSpec, in which case it is built at
    ``input_hw``. When a graph is passed with ``input_hw`` the two must agree.
    """
    if isinstance(graph, ModelSpec):
        if input_hw is None:
            raise ValueError("input_hw is required when counting FLOPs of a spec")
        graph = build_graph(graph, input_hw)
    elif input_hw is not None and tuple(input_hw) != graph.input_shape[:2]:
        raise GraphError(f"graph was built for {graph.input_shape[:2]}, not {tuple(input_hw)}")
    return sum(node_flops(graph, n) for n in graph.nodes)


def output_stride_of(graph: ComputeGraph) -> int:
    H, W, _ = graph.input_shape
    h, w, _ = graph.nodes[graph.logits_node].shape
    if H % h or W % w or H // h != W // w:
        raise GraphError(f"non-uniform output stride: input {H}x{W}, logits {h}x{w}")
    return H // h


def receptive_field(graph: ComputeGraph, upto: Optional[int] = None) -> tuple[int, int]:
    """Receptive field (rows, cols) in input pixels at node ``upto`` (default: output).

    Uses the usual recursion r' = r + (k_eff - 1) * j, j' = j * s over the
    largest field reaching each node. Upsampling divides the jump by its
    factor. Global pooling sees the whole input.
    """
    H, W, _ = graph.input_shape
    rf: dict[int, tuple[list, list]] = {}
    target = graph.output_node if upto is None else upto
    for n in graph.nodes:
        if n.op == "input":
            rf[n.id] = ([1, Fraction(1)], [1, Fraction(1)])
            continue
        ins = [rf[i] for i in n.inputs]
        axes = []
        for ax, extent, out_extent in ((0, H, n.shape[0]), (1, W, n.shape[1])):
            r = max(i[ax][0] for i in ins)
            j = max(i[ax][1] for i in ins)
            if n.op in ("conv2d", "depthwise_conv2d", "max_pool"):
                k_eff = (n.attrs["kernel"] - 1) * n.attrs.get("dilation", 1) + 1
                r = r + (k_eff - 1) * j
                j = j * n.attrs["stride"]
            elif n.op == "resize_nearest":
                j = j / n.attrs["factor"]
            elif n.op == "resize_bilinear":
                in_extent = graph.nodes[n.inputs[0]].shape[ax]
                j = j * Fraction(in_extent, out_extent)
            elif n.op == "global_avg_pool":
                r = max(r, extent)
                j = Fraction(extent)
            axes.append([r, j])
        rf[n.id] = (axes[0], axes[1])
        if n.id == target:
            break
    r = rf[target]
    return int(math.ceil(r[0][0])), int(math.ceil(r[1][0]))


# -- summaries ------------------------------------------------------------------


@dataclass
class NodeStats:
    node: int
    name: str
    op: str
    group: str
    params: int
    flops: int
    shape: tuple[int, int, int]


@dataclass
class ModelStats:
    input_hw: tuple[int, int]
    total_params: int
    total_flops: int
    per_node: list[NodeStats]
    output_stride: int
    receptive_field: tuple[int, int]
    notes: list[str] = field(default_factory=list)
    anchor: Optional[dict] = None

    @property
    def multiply_adds(self) -> int:
        return self.total_flops // 2

    def by_subgraph(self) -> dict[str, dict[str, int]]:
        """Params/FLOPs split into stem, backbone (blocks + resampling), aspp, head, classifier."""
        out: dict[str, dict[str, int]] = {}
        for ns in self.per_node:
            key = subgraph_of(ns.group)
            d = out.setdefault(key, {"params": 0, "flops": 0})
            d["params"] += ns.params
            d["flops"] += ns.flops
        return out

    def to_dict(self, per_node: bool = False) -> dict:
        d = {
            "input_hw": list(self.input_hw),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "multiply_adds": self.multiply_adds,
            "flop_convention": FLOP_CONVENTION,
            "output_stride": self.output_stride,
            "receptive_field": list(self.receptive_field),
            "subgraphs": self.by_subgraph(),
            "notes": list(self.notes),
        }
        if self.anchor is not None:
            d["anchor"] = self.anchor
        if per_node:
            d["per_node"] = [
                {"node": s.node, "name": s.name, "op": s.op, "params": s.params, "flops": s.flops,
                 "shape": list(s.shape)}
                for s in self.per_node
            ]
        return d


def subgraph_of(group: str) -> str:
    head = group.split("/", 1)[0]
    if head.startswith(("block", "resample")):
        return "backbone"
    if head == "stem":
        return "backbone"
    return head or "input"


def stats_of_graph(graph: ComputeGraph) -> ModelStats:
    per_node = [
        NodeStats(n.id, n.name, n.op, n.group, node_params(graph, n), node_flops(graph, n), n.shape)
        for n in graph.nodes
    ]
    return ModelStats(
        input_hw=graph.input_shape[:2],
        total_params=sum(s.params for s in per_node),
        total_flops=sum(s.flops for s in per_node),
        per_node=per_node,
        output_stride=output_stride_of(graph),
        receptive_field=receptive_field(graph),
        notes=list(graph.notes),
    )


def summarize(spec: ModelSpec, input_hw: tuple[int, int], num_classes: Optional[int] = None) -> ModelStats:
    if num_classes is not None and num_classes != spec.num_classes:
        spec = spec.replace(num_classes=num_classes)
    stats = stats_of_graph(build_graph(spec, input_hw))
    anchor = match_anchor(spec)
    if anchor is not None:
        stats.anchor = anchor_report(anchor, stats)
    return stats


# -- published reference values --------------------------------------------------


def load_anchors() -> list[dict]:
    text = resources.files("spineseg").joinpath("anchors.json").read_text()
    return json.loads(text)["anchors"]


def anchor_spec(anchor: dict) -> ModelSpec:
    return named_model(
        anchor["model"],
        anchor["num_classes"],
        anchor.get("output_stride"),
        tuple(anchor["aspp_rates"]),
    )


def spec_digest(spec: ModelSpec) -> str:
    return hashlib.sha256(serialize_spec(spec).encode()).hexdigest()


def match_anchor(spec: ModelSpec) -> Optional[dict]:
    digest = spec_digest(spec)
    for anchor in load_anchors():
        if spec_digest(anchor_spec(anchor)) == digest:
            return anchor
    return None


def anchor_report(anchor: dict, stats: ModelStats) -> dict:
    out = {"id": anchor["id"], "source": anchor["source"]}
    if anchor.get("params_m") is not None:
        got = stats.total_params / 1e6
        out["params_m"] = {"reported": anchor["params_m"], "computed": round(got, 3),
                           "deviation_pct": round(100 * (got - anchor["params_m"]) / anchor["params_m"], 2)}
    if anchor.get("flops_b") is not None:
        out["flops_b"] = {"reported": anchor["flops_b"], "computed": round(stats.total_flops / 1e9, 3),
                          "note": "resolution behind the reported value is unknown; compare ratios"}
    return out


def format_table(stats: ModelStats) -> str:
    rows = [
        ("input", f"{stats.input_hw[0]}x{stats.input_hw[1]}"),
        ("params", f"{stats.total_params:,} ({stats.total_params / 1e6:.2f}M)"),
        ("multiply-adds", f"{stats.multiply_adds:,} ({stats.multiply_adds / 1e9:.2f}B)"),
        ("FLOPs", f"{stats.total_flops:,} ({stats.total_flops / 1e9:.2f}B)"),
        ("output stride", str(stats.output_stride)),
        ("receptive field", f"{stats.receptive_field[0]}x{stats.receptive_field[1]}"),
    ]
    for name, d in stats.by_subgraph().items():
        if name == "input":
            continue
        rows.append((f"  {name} params", f"{d['params']:,}"))
    if stats.anchor:
        a = stats.anchor
        if "params_m" in a:
            p = a["params_m"]
            rows.append(("anchor params", f"{p['reported']}M reported, {p['computed']}M computed, "
                                          f"{p['deviation_pct']:+.2f}% ({a['source']})"))
        if "flops_b" in a:
            rows.append(("anchor FLOPs", f"{a['flops_b']['reported']}B reported, {a['flops_b']['computed']}B computed"))
    rows.append(("convention", FLOP_CONVENTION))
    for note in stats.notes:
        rows.append(("note", note))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
