"""Self-check suite behind ``spineseg verify``."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import archspec
from .analysis import output_stride_of
from .graph import build_graph
from .search import SearchConfig, candidate_to_spec, enumerate_candidates, search_space_size, spec_to_candidate
from .tensorops import conv2d, conv2d_reference, depthwise_conv2d


def zero_insert(k: np.ndarray, dilation: int) -> np.ndarray:
    """Expand a (kh, kw, ...) kernel to its dilated footprint, filling holes with zeros."""
    if dilation == 1:
        return k.copy()
    kh, kw = k.shape[:2]
    out = np.zeros(((kh - 1) * dilation + 1, (kw - 1) * dilation + 1) + k.shape[2:], dtype=k.dtype)
    out[::dilation, ::dilation] = k
    return out


def check_table() -> None:
    table, dims = archspec.S49_TABLE, archspec.S49_FEATURE_DIMS
    assert len(table) == 22 and len(dims) == 22, "block table must have 22 rows"
    for i, ((level, lr, adj, dil), fd) in enumerate(zip(table, dims)):
        assert fd == archspec.level_dim(level + adj), f"B{i}: feature dim {fd} does not match level L{level + adj}"
        assert lr is None or lr < i, f"B{i}: connection {lr} is not an earlier block"
        assert dil in archspec.DILATION_DOMAIN, f"B{i}: dilation {dil} outside domain"
        assert adj in archspec.ADJUSTMENT_DOMAIN, f"B{i}: adjustment {adj} outside domain"
    assert archspec.validate_spec(archspec.spinenet_s49_spec()) == [], "S49 spec fails validation"


def check_roundtrip() -> None:
    spec = archspec.spinenet_s49_spec()
    cfg = SearchConfig()
    assert candidate_to_spec(spec_to_candidate(spec, cfg), cfg) == spec, "S49 does not round-trip through a candidate"


def check_dilation_placement() -> None:
    spec = archspec.spinenet_s49_spec()
    graph = build_graph(spec, (128, 128))
    for b in spec.blocks[2:]:
        convs = [n for n in graph.nodes if n.group == f"block{b.id}" and n.op == "conv2d" and n.attrs["kernel"] == 3]
        assert len(convs) == 1, f"B{b.id}: expected one 3x3 conv, found {len(convs)}"
        assert convs[0].attrs["dilation"] == b.dilation, f"B{b.id}: dilation {convs[0].attrs['dilation']} != {b.dilation}"


def check_dilation_oracle(cases: int = 24, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for case in range(cases):
        k_size = (1, 3)[case % 2]
        d = (1, 2, 4)[(case // 2) % 3]
        x = rng.standard_normal((1, 8, 8, 2)).astype(np.float32)
        k = rng.standard_normal((k_size, k_size, 2, 3)).astype(np.float32)
        got = conv2d(x, k, 1, d)
        want = conv2d_reference(x, zero_insert(k, d), 1, 1)
        err = float(np.max(np.abs(got - want)))
        assert err <= 1e-5, f"k={k_size} d={d}: max abs diff {err}"


def check_separable_oracle(cases: int = 10, seed: int = 1) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        c, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        d = int(rng.choice([1, 2, 4]))
        x = rng.standard_normal((1, 7, 7, c)).astype(np.float32)
        dw = rng.standard_normal((3, 3, c, 1)).astype(np.float32)
        pw = rng.standard_normal((1, 1, c, co)).astype(np.float32)
        dense = np.einsum("hwc,co->hwco", dw[:, :, :, 0], pw[0, 0]).astype(np.float32)
        got = conv2d(depthwise_conv2d(x, dw, 1, d), pw)
        want = conv2d_reference(x, dense, 1, d)
        err = float(np.max(np.abs(got - want)))
        assert err <= 1e-5, f"separable vs dense: max abs diff {err}"


def check_shape_laws() -> None:
    s49 = archspec.spinenet_s49_spec()
    for spec, os in ((s49, 8), (archspec.set_output_stride(s49, 4), 4), (archspec.resnet_s50_spec(), 16)):
        for hw in ((128, 128), (256, 384)):
            g = build_graph(spec, hw)
            assert output_stride_of(g) == os, f"output stride {output_stride_of(g)} != {os}"
            assert g.nodes[g.logits_node].shape[:2] == (hw[0] // os, hw[1] // os)


def check_search_space() -> None:
    size = search_space_size(SearchConfig())
    assert size["permutations"] == math.factorial(19)
    assert size["connections"] == math.factorial(20)
    assert size["adjustments"] == 2**19
    assert size["dilations"] == 3**19
    for n, m in ((1, 1), (2, 2), (3, 1)):
        cfg = SearchConfig(level_multiset=tuple(range(3, 3 + n)), m=m, dilation_domain=(1, 2))
        count = sum(1 for _ in enumerate_candidates(cfg))
        assert count == search_space_size(cfg)["total"], f"N={n} m={m}: enumeration {count} != formula"


CHECKS: tuple[tuple[str, Callable[[], None]], ...] = (
    ("block table consistency", check_table),
    ("block table candidate round-trip", check_roundtrip),
    ("dilation placement", check_dilation_placement),
    ("dilated conv vs zero-inserted kernel", check_dilation_oracle),
    ("depthwise-separable vs dense conv", check_separable_oracle),
    ("output stride shape laws", check_shape_laws),
    ("search space arithmetic", check_search_space),
)


def run_checks() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # report every failure, keep going
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
