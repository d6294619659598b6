"""Lowering of ModelSpecs into flat, topologically ordered compute graphs."""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .archspec import (
    BOTTLENECK,
    INITIAL,
    INVERTED_BOTTLENECK,
    BlockSpec,
    ModelSpec,
    level_dim,
    round_width,
    validate_spec,
)

OPS = (
    "input",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm",
    "activation",
    "max_pool",
    "resize_nearest",
    "resize_bilinear",
    "global_avg_pool",
    "add",
    "concat",
)

RESAMPLE_ALPHA = 0.5
BN_EPSILON = 1e-3


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    name: str
    shape: tuple[int, int, int]  # per-sample (H, W, C)
    attrs: dict = field(default_factory=dict)
    weights: tuple[str, ...] = ()
    group: str = ""
    level: Optional[int] = None


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[Node, ...]
    weight_slots: dict  # name -> shape tuple
    input_shape: tuple[int, int, int]
    num_outputs: int
    logits_node: int
    notes: tuple[str, ...] = ()

    @property
    def output_node(self) -> int:
        return self.nodes[-1].id

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out


def _same_out(size: int, stride: int) -> int:
    return -(-size // stride)


class GraphBuilder:
    """Incrementally appends nodes, inferring per-sample output shapes."""

    def __init__(self, input_shape: tuple[int, int, int]):
        self.nodes: list[Node] = []
        self.slots: dict[str, tuple[int, ...]] = {}
        self._group = ""
        self._level: Optional[int] = None
        self._names: dict[str, int] = {}
        self.input = self._add("input", (), "input", tuple(input_shape))

    @contextlib.contextmanager
    def scope(self, group: str, level: Optional[int] = None) -> Iterator[None]:
        saved = self._group, self._level
        self._group, self._level = group, level
        try:
            yield
        finally:
            self._group, self._level = saved

    def shape(self, x: int) -> tuple[int, int, int]:
        return self.nodes[x].shape

    def _add(self, op, inputs, name, shape, attrs=None, slots=None) -> int:
        full = f"{self._group}/{name}" if self._group else name
        n = self._names.get(full, 0)
        self._names[full] = n + 1
        if n:
            full = f"{full}_{n}"
        weights = []
        for suffix, slot_shape in (slots or {}).items():
            slot = f"{full}/{suffix}"
            self.slots[slot] = tuple(slot_shape)
            weights.append(slot)
        node = Node(
            id=len(self.nodes),
            op=op,
            inputs=tuple(inputs),
            name=full,
            shape=tuple(int(s) for s in shape),
            attrs=dict(attrs or {}),
            weights=tuple(weights),
            group=self._group,
            level=self._level,
        )
        self.nodes.append(node)
        return node.id

    def conv(self, x, cout, kernel=1, stride=1, dilation=1, name="conv", bias=False) -> int:
        _check_window(kernel, stride, dilation)
        h, w, cin = self.shape(x)
        slots = {"kernel": (kernel, kernel, cin, cout)}
        if bias:
            slots["bias"] = (cout,)
        attrs = {"kernel": kernel, "stride": stride, "dilation": dilation, "padding": "same", "bias": bias}
        return self._add("conv2d", (x,), name, (_same_out(h, stride), _same_out(w, stride), cout), attrs, slots)

    def depthwise(self, x, kernel=3, stride=1, dilation=1, name="dwconv") -> int:
        _check_window(kernel, stride, dilation)
        h, w, c = self.shape(x)
        attrs = {"kernel": kernel, "stride": stride, "dilation": dilation, "padding": "same"}
        slots = {"kernel": (kernel, kernel, c, 1)}
        return self._add("depthwise_conv2d", (x,), name, (_same_out(h, stride), _same_out(w, stride), c), attrs, slots)

    def bn(self, x, name="bn") -> int:
        c = self.shape(x)[2]
        slots = {k: (c,) for k in ("scale", "offset", "mean", "var")}
        return self._add("batchnorm", (x,), name, self.shape(x), {"epsilon": BN_EPSILON}, slots)

    def act(self, x, name="relu") -> int:
        return self._add("activation", (x,), name, self.shape(x), {"fn": "relu"})

    def conv_bn(self, x, cout, kernel=1, stride=1, dilation=1, name="conv", act=True) -> int:
        y = self.bn(self.conv(x, cout, kernel, stride, dilation, name=name), name=f"{name}_bn")
        return self.act(y, name=f"{name}_relu") if act else y

    def separable_bn(self, x, cout, kernel=3, dilation=1, name="sep", act=True) -> int:
        y = self.act(self.bn(self.depthwise(x, kernel, 1, dilation, name=f"{name}_dw"), name=f"{name}_dw_bn"),
                     name=f"{name}_dw_relu")
        return self.conv_bn(y, cout, 1, name=f"{name}_pw", act=act)

    def max_pool(self, x, kernel=3, stride=2, name="maxpool") -> int:
        _check_window(kernel, stride, 1)
        h, w, c = self.shape(x)
        attrs = {"kernel": kernel, "stride": stride, "dilation": 1, "padding": "same"}
        return self._add("max_pool", (x,), name, (_same_out(h, stride), _same_out(w, stride), c), attrs)

    def resize_nearest(self, x, factor, name="upsample") -> int:
        if factor < 1:
            raise GraphError(f"resize factor must be >= 1, got {factor}")
        h, w, c = self.shape(x)
        return self._add("resize_nearest", (x,), name, (h * factor, w * factor, c), {"factor": factor})

    def resize_bilinear(self, x, target_hw, name="resize") -> int:
        c = self.shape(x)[2]
        return self._add("resize_bilinear", (x,), name, (target_hw[0], target_hw[1], c), {"target": tuple(target_hw)})

    def global_avg_pool(self, x, name="gap") -> int:
        return self._add("global_avg_pool", (x,), name, (1, 1, self.shape(x)[2]))

    def add(self, a, b, name="add") -> int:
        if self.shape(a) != self.shape(b):
            raise GraphError(f"add: shape mismatch {self.shape(a)} vs {self.shape(b)} at {name}")
        return self._add("add", (a, b), name, self.shape(a))

    def concat(self, xs: Sequence[int], name="concat") -> int:
        shapes = [self.shape(x) for x in xs]
        if len({s[:2] for s in shapes}) != 1:
            raise GraphError(f"concat: spatial mismatch {shapes} at {name}")
        h, w = shapes[0][:2]
        return self._add("concat", tuple(xs), name, (h, w, sum(s[2] for s in shapes)))

    def finish(self, logits: int, num_outputs: int, notes=()) -> ComputeGraph:
        graph = ComputeGraph(
            nodes=tuple(self.nodes),
            weight_slots=dict(self.slots),
            input_shape=self.nodes[0].shape,
            num_outputs=num_outputs,
            logits_node=logits,
            notes=tuple(notes),
        )
        check_graph(graph)
        return graph


def _check_window(kernel, stride, dilation):
    if kernel < 1 or kernel % 2 == 0:
        raise GraphError(f"kernel size must be odd and positive, got {kernel}")
    if stride < 1 or dilation < 1:
        raise GraphError(f"stride and dilation must be >= 1, got {stride}, {dilation}")


def check_graph(graph: ComputeGraph) -> None:
    """Raise GraphError unless the structural graph invariants hold."""
    used: dict[str, int] = {}
    for pos, n in enumerate(graph.nodes):
        if n.id != pos:
            raise GraphError(f"node {n.name}: id {n.id} at position {pos}")
        if n.op not in OPS:
            raise GraphError(f"node {n.id}: unknown op {n.op!r}")
        for i in n.inputs:
            if not 0 <= i < n.id:
                raise GraphError(f"node {n.id} ({n.name}): forward or dangling reference to {i}")
        for w in n.weights:
            if w in used:
                raise GraphError(f"weight slot {w} consumed by nodes {used[w]} and {n.id}")
            used[w] = n.id
    if set(used) != set(graph.weight_slots):
        raise GraphError("weight slots and node weights disagree")
    consumers = graph.consumers()
    sinks = [i for i, c in consumers.items() if not c]
    if sinks != [graph.output_node]:
        raise GraphError(f"graph must have exactly one output node, found sinks {sinks}")


# -- blocks -------------------------------------------------------------------


def make_block(
    gb: GraphBuilder,
    x: int,
    block: BlockSpec,
    family: str,
    in_channels: int,
    width: Optional[int] = None,
    expansion: Optional[int] = None,
) -> int:
    """Append one block (all its sequential replicas) consuming node ``x``.

    ``width`` is the block's inner feature dim after scaling; it defaults to
    ``block.feature_dim``.
    """
    f = block.feature_dim if width is None else width
    cin = in_channels
    if cin <= 0:
        raise GraphError("in_channels must be positive")
    if family == BOTTLENECK:
        e = 4 if expansion is None else expansion
        for r in range(block.repeats):
            tag = f"r{r}_" if block.repeats > 1 else ""
            if cin != e * f:
                shortcut = gb.conv_bn(x, e * f, 1, name=f"{tag}proj", act=False)
            else:
                shortcut = x
            y = gb.conv_bn(x, f, 1, name=f"{tag}conv1")
            y = gb.conv_bn(y, f, 3, dilation=block.dilation, name=f"{tag}conv2")
            y = gb.conv_bn(y, e * f, 1, name=f"{tag}conv3", act=False)
            x = gb.act(gb.add(y, shortcut, name=f"{tag}residual"), name=f"{tag}out_relu")
            cin = e * f
    elif family == INVERTED_BOTTLENECK:
        e = 6 if expansion is None else expansion
        for r in range(block.repeats):
            tag = f"r{r}_" if block.repeats > 1 else ""
            y = gb.conv_bn(x, e * f, 1, name=f"{tag}expand")
            y = gb.act(gb.bn(gb.depthwise(y, 3, 1, block.dilation, name=f"{tag}dwconv"), name=f"{tag}dwconv_bn"),
                       name=f"{tag}dwconv_relu")
            y = gb.conv_bn(y, f, 1, name=f"{tag}project", act=False)
            x = gb.add(y, x, name=f"{tag}residual") if cin == f else y
            cin = f
    else:
        raise GraphError(f"unknown block family {family!r}")
    return x


def make_resample(
    gb: GraphBuilder,
    x: int,
    from_level: int,
    to_level: int,
    to_ch: int,
    squeeze_ch: Optional[int] = None,
    alpha: float = RESAMPLE_ALPHA,
) -> int:
    """Adapt node ``x`` to ``to_level`` resolution and ``to_ch`` channels.

    1x1 squeeze (to ``squeeze_ch``, default ceil(alpha * input channels)),
    then nearest upsampling or a stride-2 3x3 conv followed by stride-2 max
    pools, then a 1x1 conv to the target width.
    """
    for lv in (from_level, to_level):
        if not 1 <= lv <= 7:
            raise GraphError(f"level {lv} outside [1, 7]")
    in_ch = gb.shape(x)[2]
    sq = math.ceil(alpha * in_ch) if squeeze_ch is None else squeeze_ch
    y = gb.conv_bn(x, sq, 1, name="squeeze")
    if from_level > to_level:
        y = gb.resize_nearest(y, 2 ** (from_level - to_level))
    elif from_level < to_level:
        y = gb.conv_bn(y, sq, 3, stride=2, name="down")
        for _ in range(to_level - from_level - 1):
            y = gb.max_pool(y)
    return gb.conv_bn(y, to_ch, 1, name="match", act=False)


def make_aspp(
    gb: GraphBuilder,
    x: int,
    rates: Sequence[int],
    out_ch: int = 256,
    separable: bool = False,
) -> int:
    """Atrous spatial pyramid pooling over node ``x``."""
    rates = list(rates)
    if not rates:
        raise GraphError("ASPP needs at least one dilation rate")
    if len(set(rates)) != len(rates):
        raise GraphError(f"ASPP rates must be distinct, got {rates}")
    h, w, _ = gb.shape(x)
    branches = [gb.conv_bn(x, out_ch, 1, name="b1x1")]
    for r in rates:
        if separable:
            branches.append(gb.separable_bn(x, out_ch, 3, dilation=r, name=f"rate{r}"))
        else:
            branches.append(gb.conv_bn(x, out_ch, 3, dilation=r, name=f"rate{r}"))
    pooled = gb.conv_bn(gb.global_avg_pool(x, name="pool"), out_ch, 1, name="pool_conv")
    branches.append(gb.resize_bilinear(pooled, (h, w), name="pool_resize"))
    y = gb.concat(branches)
    return gb.conv_bn(y, out_ch, 1, name="project")


# -- full lowering ------------------------------------------------------------


def block_out_channels(spec: ModelSpec, block: BlockSpec) -> int:
    w = round_width(block.feature_dim, spec.filter_multiplier)
    return w * spec.expansion if spec.block_family == BOTTLENECK else w


def check_input_size(spec: ModelSpec, input_hw: tuple[int, int]) -> None:
    deepest = max(b.final_level for b in spec.blocks)
    div = 2**deepest
    h, w = input_hw
    if h < 1 or w < 1 or h % div or w % div:
        raise GraphError(f"input size {h}x{w} is not divisible by {div} (deepest level L{deepest})")


def build_graph(spec: ModelSpec, input_hw: tuple[int, int], num_classes: Optional[int] = None,
                in_channels: int = 3) -> ComputeGraph:
    """Lower ``spec`` to a ComputeGraph for a fixed input size."""
    violations = validate_spec(spec)
    if violations:
        raise GraphError("invalid spec: " + "; ".join(str(v) for v in violations))
    check_input_size(spec, input_hw)
    classes = spec.num_classes if num_classes is None else num_classes
    H, W = input_hw
    gb = GraphBuilder((H, W, in_channels))
    family = spec.block_family
    mult = spec.filter_multiplier

    def width(fd):
        return round_width(fd, mult)

    with gb.scope("stem", 2):
        stem_ch = width(level_dim(2, family))
        x = gb.conv_bn(gb.input, stem_ch, 3, stride=2, name="conv")
        x = gb.max_pool(x)

    outputs: dict[int, int] = {}
    for b in spec.blocks:
        level = b.final_level
        f = width(b.feature_dim)
        if b.kind == INITIAL:
            prev, prev_level = (x, 2) if b.id == 0 else (outputs[b.id - 1], spec.blocks[b.id - 1].final_level)
            if prev_level != level:
                with gb.scope(f"resample{b.id}", level):
                    prev = make_resample(gb, prev, prev_level, level, f)
            src = prev
        else:
            sources = [b.id - 1]
            if b.long_range_input is not None and b.long_range_input != b.id - 1:
                sources.append(b.long_range_input)
            fused = []
            with gb.scope(f"resample{b.id}", level):
                for s in sources:
                    sb = spec.blocks[s]
                    with gb.scope(f"resample{b.id}/from{s}", level):
                        fused.append(make_resample(gb, outputs[s], sb.final_level, level, f,
                                                   squeeze_ch=math.ceil(RESAMPLE_ALPHA * width(sb.feature_dim))))
                src = fused[0]
                for other in fused[1:]:
                    src = gb.add(src, other, name="fuse")
                src = gb.act(src, name="fuse_relu")
        with gb.scope(f"block{b.id}", level):
            outputs[b.id] = make_block(gb, src, b, family, gb.shape(src)[2], width=f, expansion=spec.expansion)

    out_level = spec.blocks[-1].final_level
    with gb.scope("endpoint", out_level):
        feat = gb.conv_bn(outputs[spec.blocks[-1].id], spec.head_dim, 1, name="conv")
    with gb.scope("aspp", out_level):
        y = make_aspp(gb, feat, spec.aspp_rates, spec.head_dim, separable=spec.separable_head)
    with gb.scope("head", out_level):
        for i in range(spec.head_convs_n):
            if spec.separable_head:
                y = gb.separable_bn(y, spec.head_dim, 3, name=f"conv{i}")
            else:
                y = gb.conv_bn(y, spec.head_dim, 3, name=f"conv{i}")
    with gb.scope("classifier", out_level):
        if spec.separable_head:
            y = gb.depthwise(y, 3, name="dwconv")
            logits = gb.conv(y, classes, 1, name="conv", bias=True)
        else:
            logits = gb.conv(y, classes, 3, name="conv", bias=True)
        out = gb.resize_bilinear(logits, (H, W), name="upsample")
    notes = []
    if mult != 1.0:
        notes.append(f"filter_multiplier {mult:g} applied to backbone convolutions only; ASPP/head width fixed at {spec.head_dim}")
    graph = gb.finish(logits, classes, notes)
    assert graph.output_node == out
    return graph


# -- export ---------------------------------------------------------------------

LEVEL_COLORS = {
    1: "#f4cccc",
    2: "#d9c3e9",  # purple
    3: "#fff2a8",  # yellow
    4: "#c9ebc4",  # green
    5: "#bcd7f5",  # blue
    6: "#a7c4e0",
    7: "#93b1cc",
}


def _attr_label(n: Node) -> str:
    keys = ("kernel", "stride", "dilation", "factor", "target")
    parts = [f"{k}={n.attrs[k]}" for k in keys if k in n.attrs and n.attrs[k] not in (None,)]
    return " ".join(parts)


def export_dot(graph: ComputeGraph) -> str:
    lines = ["digraph spineseg {", "  rankdir=TB;", '  node [shape=box, style=filled, fontname="Helvetica"];']
    for n in graph.nodes:
        color = LEVEL_COLORS.get(n.level, "#e0e0e0")
        label = f"{n.op}\\n{n.name}"
        attrs = _attr_label(n)
        if attrs:
            label += f"\\n{attrs}"
        label += "\\n" + "x".join(str(s) for s in n.shape)
        lines.append(f'  n{n.id} [label="{label}", fillcolor="{color}"];')
    for n in graph.nodes:
        for i in n.inputs:
            lines.append(f"  n{i} -> n{n.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_to_dict(graph: ComputeGraph) -> dict:
    return {
        "input_shape": list(graph.input_shape),
        "num_outputs": graph.num_outputs,
        "logits_node": graph.logits_node,
        "output_node": graph.output_node,
        "nodes": [
            {
                "id": n.id,
                "op": n.op,
                "name": n.name,
                "inputs": list(n.inputs),
                "attrs": {k: list(v) if isinstance(v, tuple) else v for k, v in n.attrs.items()},
                "shape": list(n.shape),
                "weights": list(n.weights),
                "group": n.group,
                "level": n.level,
            }
            for n in graph.nodes
        ],
        "weight_slots": {k: list(v) for k, v in graph.weight_slots.items()},
        "notes": list(graph.notes),
    }


def export_json(graph: ComputeGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=1, sort_keys=True) + "\n"
