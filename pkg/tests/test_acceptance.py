"""Acceptance criteria. Each test prints one PASS/FAIL line with its measurement."""

import math
import time

import numpy as np
import pytest

from spineseg import archspec
from spineseg.analysis import count_flops, output_stride_of, stats_of_graph
from spineseg.archspec import CITYSCAPES_ASPP_RATES, PASCAL_ASPP_RATES, named_model, set_output_stride
from spineseg.graph import build_graph
from spineseg.search import (
    SearchConfig,
    candidate_to_spec,
    enumerate_candidates,
    flop_budget,
    sample_candidate,
    search_space_size,
    spec_to_candidate,
)
from spineseg.tensorops import (
    conv2d,
    conv2d_reference,
    depthwise_conv2d,
    execute,
    init_random_weights,
)
from spineseg.verify import zero_insert

# Dilation column of the learned 49-block table for blocks 2..21, frozen here
# independently of the library's copy.
S49_DILATIONS = (1, 2, 1, 1, 1, 2, 1, 4, 1, 2, 4, 1, 4, 4, 1, 4, 2, 1, 4, 1)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok

    return emit


# 1 -- parameter anchors ----------------------------------------------------------

PARAM_ANCHORS = [
    ("s49", 21, None, PASCAL_ASPP_RATES, 69.0),
    ("s96", 21, None, PASCAL_ASPP_RATES, 116.0),
    ("s143", 21, None, PASCAL_ASPP_RATES, 162.0),
    ("s143plus", 19, 4, CITYSCAPES_ASPP_RATES, 275.0),
    ("mobile-s49", 19, None, CITYSCAPES_ASPP_RATES, 4.40),
    ("mobile-s49minus", 19, None, CITYSCAPES_ASPP_RATES, 3.15),
]


@pytest.mark.parametrize("name,classes,os,rates,reported", PARAM_ANCHORS, ids=[a[0] for a in PARAM_ANCHORS])
def test_1_param_anchors(report, name, classes, os, rates, reported):
    spec = named_model(name, classes, os, rates)
    if name == "s143plus":
        assert spec.head_convs_n == 2 and spec.output_stride == 4
    stats = stats_of_graph(build_graph(spec, (256, 256)))
    got = stats.total_params / 1e6
    dev = (got - reported) / reported
    parts = ", ".join(f"{k} {v['params'] / 1e6:.3f}M" for k, v in stats.by_subgraph().items() if v["params"])
    ok = abs(dev) <= 0.10
    report(1, ok, f"{name} params {got:.3f}M vs {reported}M ({100 * dev:+.1f}%, tol 10%) [{parts}]")
    assert ok


# 2 -- FLOP ratios ------------------------------------------------------------------

FLOP_RATIOS = [
    ("s96", "pascal", 154 / 98),
    ("s143", "pascal", 210 / 98),
    ("s96", "cityscapes", 1272 / 798),
]


@pytest.mark.parametrize("name,dataset,reported", FLOP_RATIOS, ids=[f"{a}-{b}" for a, b, _ in FLOP_RATIOS])
def test_2_flop_ratios(report, name, dataset, reported):
    if dataset == "pascal":
        classes, rates, hw = 21, PASCAL_ASPP_RATES, (512, 512)
    else:
        classes, rates, hw = 19, CITYSCAPES_ASPP_RATES, (1024, 2048)
    base = count_flops(build_graph(named_model("s49", classes, None, rates), hw))
    big = count_flops(build_graph(named_model(name, classes, None, rates), hw))
    ratio = big / base
    dev = (ratio - reported) / reported
    ok = abs(dev) <= 0.10
    report(2, ok, f"FLOPs {name}/s49 {dataset} at {hw[0]}x{hw[1]}: {ratio:.3f} vs {reported:.3f} "
                  f"({100 * dev:+.1f}%, tol 10%); s49 absolute {base / 1e9:.1f}B FLOPs")
    assert ok


# 3 -- output stride law -----------------------------------------------------------


def test_3_output_stride_law(report):
    failures = []
    sizes = [(128, 128), (256, 384), (384, 128)]
    cases = []
    for name in archspec.MODEL_NAMES:
        spec = named_model(name)
        cases.append((name, spec, 16 if name == "resnet-s50" else 8))
        if name != "resnet-s50":
            cases.append((f"{name}@os4", set_output_stride(spec, 4), 4))
    for label, spec, os in cases:
        for hw in sizes:
            g = build_graph(spec, hw)
            got = g.nodes[g.logits_node].shape[:2]
            if got != (hw[0] // os, hw[1] // os) or output_stride_of(g) != os:
                failures.append(f"{label} {hw}: {got}")
    ok = not failures
    report(3, ok, f"{len(cases) * len(sizes)} spec/size pairs, exact" + (f"; mismatches {failures}" if failures else ""))
    assert ok


# 4 -- dilation oracle ---------------------------------------------------------------


def test_4_dilation_oracle(report):
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    for case in range(200):
        k = (1, 3)[case % 2]
        d = (1, 2, 4)[(case // 2) % 3]
        h, w = (int(v) for v in rng.integers(1, 12, size=2))
        ci, co = (int(v) for v in rng.integers(1, 5, size=2))
        x = rng.standard_normal((1, h, w, ci)).astype(np.float32)
        kern = rng.standard_normal((k, k, ci, co)).astype(np.float32)
        got = conv2d(x, kern, 1, d)
        want = conv2d_reference(x, zero_insert(kern, d), 1, 1)
        worst = max(worst, float(np.max(np.abs(got - want))))
        count += 1
    ok = worst <= 1e-5
    report(4, ok, f"{count} cases, max abs diff {worst:.2e} (tol 1e-5)")
    assert ok


# 5 -- depthwise-separable oracle --------------------------------------------------------


def test_5_separable_oracle(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        c, co = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        k = int(rng.choice([1, 3]))
        s, d = int(rng.choice([1, 2])), int(rng.choice([1, 2, 4]))
        h, w = (int(v) for v in rng.integers(2, 11, size=2))
        x = rng.standard_normal((1, h, w, c)).astype(np.float32)
        dw = rng.standard_normal((k, k, c, 1)).astype(np.float32)
        pw = rng.standard_normal((1, 1, c, co)).astype(np.float32)
        block_diag = np.zeros((k, k, c, c), np.float32)
        for ch in range(c):
            block_diag[:, :, ch, ch] = dw[:, :, ch, 0]
        dense = np.einsum("hwcd,do->hwco", block_diag, pw[0, 0]).astype(np.float32)
        dw_out = depthwise_conv2d(x, dw, s, d)
        worst = max(worst, float(np.max(np.abs(dw_out - conv2d_reference(x, block_diag, s, d)))))
        worst = max(worst, float(np.max(np.abs(conv2d(dw_out, pw) - conv2d_reference(x, dense, s, d)))))
    ok = worst <= 1e-5
    report(5, ok, f"100 cases, max abs diff {worst:.2e} (tol 1e-5)")
    assert ok


# 6 -- search space arithmetic ---------------------------------------------------------


def test_6_search_space(report):
    size = search_space_size(SearchConfig())
    default_ok = (
        size["permutations"] == math.factorial(19)
        and size["connections"] == math.factorial(20) // math.factorial(1)
        and size["adjustments"] == 2**19 == 524_288
        and size["dilations"] == 3**19 == 1_162_261_467
    )
    mismatches, toys = [], 0
    for n in range(1, 6):
        for m in (1, 2, 3):
            for a in ((0,), (-1, 0)):
                for d in ((1,), (1, 2), (1, 2, 4)):
                    cfg = SearchConfig(level_multiset=tuple(range(3, 3 + n)), m=m, adjustment_domain=a,
                                       dilation_domain=d)
                    total = search_space_size(cfg)["total"]
                    if total > 10**6:
                        continue
                    toys += 1
                    if sum(1 for _ in enumerate_candidates(cfg)) != total:
                        mismatches.append((n, m, len(a), len(d)))
    ok = default_ok and not mismatches
    report(6, ok, f"default sizes exact={default_ok}; {toys} toy configs enumerated, mismatches {mismatches}")
    assert ok


# 7 -- block table round-trip ------------------------------------------------------------


def test_7_table_roundtrip(report):
    cfg = SearchConfig()
    spec = archspec.spinenet_s49_spec()
    roundtrip = candidate_to_spec(spec_to_candidate(spec, cfg), cfg) == spec
    graph = build_graph(spec, (128, 128))
    placed = []
    for b in spec.blocks[2:]:
        convs = [n for n in graph.nodes if n.group == f"block{b.id}" and n.op == "conv2d" and n.attrs["kernel"] == 3]
        placed.append(convs[0].attrs["dilation"] if len(convs) == 1 else None)
    ok = roundtrip and tuple(placed) == S49_DILATIONS
    report(7, ok, f"round-trip identity={roundtrip}; dilation placement matches for "
                  f"{sum(p == e for p, e in zip(placed, S49_DILATIONS))}/20 searched blocks")
    assert ok


# 8 -- feasibility gate ----------------------------------------------------------------


def test_8_feasibility(report):
    cfg = SearchConfig()
    budget = flop_budget(cfg)
    baseline = count_flops(build_graph(archspec.resnet_s50_spec(), cfg.input_hw))
    worst, over = 0, 0
    for t in range(1000):
        flops = count_flops(build_graph(candidate_to_spec(sample_candidate([0, t], cfg), cfg), cfg.input_hw))
        worst = max(worst, flops)
        over += flops > budget
    ok = over == 0 and baseline == budget
    report(8, ok, f"1000 candidates at {cfg.input_hw[0]}x{cfg.input_hw[1]}: {over} over budget, "
                  f"max {worst / budget:.3f} of budget; baseline == budget: {baseline == budget}")
    assert ok


# 9 -- forward determinism -------------------------------------------------------------


def test_9_forward_determinism(report):
    start = time.perf_counter()
    graph = build_graph(archspec.spinenet_s49_spec(), (128, 128))
    x = np.random.default_rng(11).standard_normal((1, 128, 128, 3)).astype(np.float32)
    runs = [execute(graph, x, init_random_weights(graph, 3), workers=w).tobytes() for w in (1, 1, 4)]
    elapsed = time.perf_counter() - start
    ok = runs[0] == runs[1] == runs[2] and elapsed < 120
    report(9, ok, f"3 runs (workers 1,1,4) byte-identical={runs[0] == runs[1] == runs[2]}, {elapsed:.1f}s (limit 120s)")
    assert ok


# 10 -- full-graph shape run -------------------------------------------------------------


@pytest.mark.parametrize("name", archspec.MODEL_NAMES)
def test_10_shape_run(report, name):
    mobile = name.startswith("mobile")
    classes = 19 if mobile or name == "s143plus" else 21
    os = 4 if name == "s143plus" else None
    rates = CITYSCAPES_ASPP_RATES if classes == 19 else PASCAL_ASPP_RATES
    spec = named_model(name, classes, os, rates)
    hw = (128, 128) if mobile else (256, 256)
    graph = build_graph(spec, hw)
    x = np.random.default_rng(0).standard_normal((1, *hw, 3)).astype(np.float32)
    try:
        y = execute(graph, x, init_random_weights(graph, 0))
        shape, err = y.shape, None
    except Exception as exc:  # report node-level failures as a FAIL line
        shape, err = None, exc
    ok = err is None and shape == (1, *hw, classes) and bool(np.isfinite(y).all())
    report(10, ok, f"{name} 1x{hw[0]}x{hw[1]}x3 -> {shape if err is None else err}")
    assert ok
