import dataclasses
import json
import re

import pytest
from hypothesis import given, settings, strategies as st

from spineseg import archspec
from spineseg.analysis import node_params, output_stride_of
from spineseg.graph import (
    GraphBuilder,
    GraphError,
    build_graph,
    check_graph,
    export_dot,
    export_json,
    graph_to_dict,
)


@pytest.fixture(scope="module")
def s49_graph():
    return build_graph(archspec.spinenet_s49_spec(), (128, 128))


@pytest.mark.parametrize("name", archspec.MODEL_NAMES)
def test_named_graphs_are_well_formed(name):
    spec = archspec.named_model(name, 19)
    g = build_graph(spec, (256, 256))
    check_graph(g)
    assert g.nodes[g.output_node].shape == (256, 256, 19)
    assert g.nodes[g.logits_node].shape[:2] == (256 // spec.output_stride,) * 2
    assert [n.id for n in g.nodes] == list(range(len(g.nodes)))
    assert all(i < n.id for n in g.nodes for i in n.inputs)


def test_output_stride_law(s49_graph):
    assert output_stride_of(s49_graph) == 8
    os4 = build_graph(archspec.set_output_stride(archspec.spinenet_s49_spec(), 4), (128, 256))
    assert os4.nodes[os4.logits_node].shape[:2] == (32, 64)
    base = build_graph(archspec.resnet_s50_spec(), (256, 128))
    assert output_stride_of(base) == 16


def test_block_wiring(s49_graph):
    names = {n.name for n in s49_graph.nodes}
    # block 5 fuses its predecessor (same level) with block 2 (one level up)
    r5 = [n.name for n in s49_graph.nodes if n.name.startswith("resample5/")]
    assert r5 == ["resample5/from4/squeeze", "resample5/from4/squeeze_bn", "resample5/from4/squeeze_relu",
                  "resample5/from4/match", "resample5/from4/match_bn",
                  "resample5/from2/squeeze", "resample5/from2/squeeze_bn", "resample5/from2/squeeze_relu",
                  "resample5/from2/down", "resample5/from2/down_bn", "resample5/from2/down_relu",
                  "resample5/from2/match", "resample5/from2/match_bn", "resample5/fuse", "resample5/fuse_relu"]
    assert any(n.startswith("resample21/from0/") for n in names)
    stem = [n for n in s49_graph.nodes if n.group == "stem"]
    assert [n.op for n in stem] == ["conv2d", "batchnorm", "activation", "max_pool"]
    assert stem[-1].shape == (32, 32, 64)


def test_bottleneck_shapes(s49_graph):
    # block 9 is at L7 with FD 512, output 4*FD
    out = [n for n in s49_graph.nodes if n.group == "block9"][-1]
    assert out.shape == (1, 1, 2048)
    conv2 = next(n for n in s49_graph.nodes if n.name == "block9/conv2")
    assert conv2.attrs["dilation"] == 4 and conv2.shape[2] == 512


def test_repeats_create_replicas():
    g = build_graph(archspec.named_model("s96"), (128, 128))
    names = {n.name for n in g.nodes}
    assert {"block4/r0_conv2", "block4/r1_conv2"} <= names
    assert "block4/r2_conv2" not in names


def test_mobile_head_is_separable():
    g = build_graph(archspec.named_model("mobile-s49", 19), (128, 128))
    aspp = [n for n in g.nodes if n.group == "aspp"]
    assert any(n.op == "depthwise_conv2d" and n.attrs["dilation"] == 24 for n in aspp)
    assert not any(n.op == "conv2d" and n.attrs["kernel"] == 3 for n in g.nodes if n.group in ("aspp", "classifier"))
    block = [n for n in g.nodes if n.group == "block5"]
    assert [n.op for n in block if n.op.endswith("conv2d")] == ["conv2d", "depthwise_conv2d", "conv2d"]


def test_indivisible_input_rejected():
    with pytest.raises(GraphError, match="divisible"):
        build_graph(archspec.spinenet_s49_spec(), (100, 128))


def test_invalid_spec_rejected():
    spec = archspec.spinenet_s49_spec().replace(output_stride=16)
    with pytest.raises(GraphError, match="output_level"):
        build_graph(spec, (128, 128))


def test_set_output_stride_touches_only_tail():
    spec = archspec.spinenet_s49_spec()
    a = {n.name: n for n in build_graph(spec, (256, 256)).nodes}
    b = {n.name: n for n in build_graph(archspec.set_output_stride(spec, 4), (256, 256)).nodes}
    changed = {name.split("/")[0] for name in set(a) ^ set(b)}
    for name in set(a) & set(b):
        x, y = a[name], b[name]
        if (x.shape, x.attrs, x.inputs) != (y.shape, y.attrs, y.inputs):
            changed.add(name.split("/")[0])
    assert changed <= {"resample21", "block21", "endpoint", "aspp", "head", "classifier", "input"}
    assert "block21" in changed


def test_check_graph_catches_slot_reuse(s49_graph):
    nodes = list(s49_graph.nodes)
    conv = [n for n in nodes if n.op == "conv2d"]
    nodes[conv[1].id] = dataclasses.replace(conv[1], weights=conv[0].weights)
    with pytest.raises(GraphError):
        check_graph(dataclasses.replace(s49_graph, nodes=tuple(nodes)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.booleans())
def test_conv_params_match_slots(cin, cout, k, s, bias):
    gb = GraphBuilder((8, 8, cin))
    y = gb.conv(gb.input, cout, k, stride=s, bias=bias)
    g = gb.finish(y, cout)
    assert node_params(g, g.nodes[y]) == k * k * cin * cout + (cout if bias else 0)
    assert g.weight_slots[g.nodes[y].weights[0]] == (k, k, cin, cout)
    assert g.nodes[y].shape == (-(-8 // s), -(-8 // s), cout)


def test_builder_shape_errors():
    gb = GraphBuilder((8, 8, 3))
    a = gb.conv(gb.input, 4)
    b = gb.conv(gb.input, 5)
    with pytest.raises(GraphError):
        gb.add(a, b)
    c = gb.conv(gb.input, 4, stride=2)
    with pytest.raises(GraphError):
        gb.concat([a, c])


def test_exports_are_deterministic(s49_graph):
    dot = export_dot(s49_graph)
    assert dot == export_dot(build_graph(archspec.spinenet_s49_spec(), (128, 128)))
    assert dot.startswith("digraph spineseg {") and dot.rstrip().endswith("}")
    vertices = re.findall(r"^  n\d+ \[", dot, re.M)
    edges = re.findall(r"^  n\d+ -> n\d+;", dot, re.M)
    d = json.loads(export_json(s49_graph))
    assert len(vertices) == len(d["nodes"]) == len(s49_graph.nodes)
    assert len(edges) == sum(len(n["inputs"]) for n in d["nodes"])
    assert d == json.loads(json.dumps(graph_to_dict(s49_graph)))


def test_level_colors_in_dot(s49_graph):
    dot = export_dot(s49_graph)
    assert '#d9c3e9' in dot and '#fff2a8' in dot and '#c9ebc4' in dot and '#bcd7f5' in dot
