import itertools
import math
import sys
from collections import Counter

import numpy as np
import pytest

from spineseg import archspec
from spineseg.analysis import count_flops
from spineseg.graph import build_graph
from spineseg.search import (
    Candidate,
    CandidateError,
    CommandEvaluator,
    SearchConfig,
    baseline_flops,
    candidate_to_spec,
    check_candidate,
    enumerate_candidates,
    flop_budget,
    flops_evaluator,
    is_feasible,
    random_search,
    run_trials,
    s49_candidate,
    sample_candidate,
    search_report,
    search_space_size,
    spec_to_candidate,
    two_connection_count,
)


def toy(n, m=1, a=(-1, 0), d=(1, 2)):
    return SearchConfig(level_multiset=tuple(range(3, 3 + n)), m=m, adjustment_domain=a, dilation_domain=d)


def test_default_space_size():
    size = search_space_size(SearchConfig())
    assert size["permutations"] == math.factorial(19)
    assert size["connections"] == math.factorial(20) // math.factorial(1)
    assert size["adjustments"] == 524_288
    assert size["dilations"] == 1_162_261_467
    assert size["total"] == math.prod(size[k] for k in ("permutations", "connections", "adjustments", "dilations"))


@pytest.mark.parametrize("n,m,a,d", [(1, 1, (0,), (1,)), (2, 1, (-1, 0), (1, 2)), (2, 3, (-1, 0), (1, 2, 4)),
                                     (3, 2, (-1, 0), (1, 2)), (3, 1, (0,), (1, 2, 4))])
def test_enumeration_matches_formula(n, m, a, d):
    cfg = toy(n, m, a, d)
    cands = list(enumerate_candidates(cfg))
    assert len(cands) == len(set(cands)) == search_space_size(cfg)["total"]
    for c in cands[:: max(1, len(cands) // 50)]:
        check_candidate(c, cfg)


def test_two_connection_count():
    cfg = toy(3, 2)
    assert two_connection_count(cfg) == math.comb(2, 2) * math.comb(3, 2) * math.comb(4, 2)


def test_output_choices_extend_space():
    cfg = toy(2, 1, (0,), (1, 2))
    assert len(list(enumerate_candidates(cfg, output_choices=True))) == search_space_size(cfg)["total"] * 3 * 2


def test_permutation_frequencies_uniform():
    cfg = toy(3)
    trials = 6000
    counts = Counter(sample_candidate([7, t], cfg).permutation for t in range(trials))
    p = 1 / 6
    sigma = math.sqrt(trials * p * (1 - p))
    assert set(counts) == set(itertools.permutations(range(3)))
    assert all(abs(c - trials * p) <= 3 * sigma for c in counts.values())


def test_long_range_frequencies_uniform():
    cfg = toy(3, m=2)
    trials = 4000
    last = Counter(sample_candidate([3, t], cfg).long_range[2] for t in range(trials))
    p = 1 / 4
    sigma = math.sqrt(trials * p * (1 - p))
    assert set(last) == {0, 1, 2, 3}
    assert all(abs(c - trials * p) <= 3 * sigma for c in last.values())


def test_sampling_is_seeded():
    cfg = SearchConfig()
    assert sample_candidate([1, 2], cfg) == sample_candidate([1, 2], cfg)
    assert sample_candidate([1, 2], cfg) != sample_candidate([1, 3], cfg)
    assert sample_candidate(np.random.default_rng(5), cfg) == sample_candidate(5, cfg)


def test_s49_roundtrip():
    cfg = SearchConfig()
    spec = archspec.spinenet_s49_spec()
    cand = s49_candidate(cfg)
    assert candidate_to_spec(cand, cfg) == spec
    assert spec_to_candidate(candidate_to_spec(cand, cfg), cfg) == cand
    assert Candidate.from_dict(cand.to_dict()) == cand


def test_literal_preset_rejects_s49():
    cfg = SearchConfig.from_dict({"preset": "literal"})
    assert cfg.level_multiset.count(5) == 9
    with pytest.raises(CandidateError):
        spec_to_candidate(archspec.spinenet_s49_spec(), cfg)


def test_config_roundtrip():
    cfg = SearchConfig(m=3, flop_budget=10**9, input_hw=(256, 256))
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        SearchConfig.from_dict({"bogus": 1})


def test_check_candidate_errors():
    cfg = toy(3, 1)
    good = Candidate((0, 1, 2), (0, 1, 2), (0, 0, 0), (1, 1, 1), 3)
    check_candidate(good, cfg)
    for bad in (
        Candidate((0, 0, 2), (0, 1, 2), (0, 0, 0), (1, 1, 1), 3),
        Candidate((0, 1, 2), (0, 2, 2), (0, 0, 0), (1, 1, 1), 3),
        Candidate((0, 1, 2), (0, 1, 2), (0, 1, 0), (1, 1, 1), 3),
        Candidate((0, 1, 2), (0, 1, 2), (0, 0, 0), (1, 4, 1), 3),
        Candidate((0, 1, 2), (0, 1, 2), (0, 0, 0), (1, 1, 1), 4),
    ):
        with pytest.raises(CandidateError):
            check_candidate(bad, cfg)


def test_baseline_sits_on_budget():
    cfg = SearchConfig(input_hw=(256, 256))
    base = archspec.resnet_s50_spec()
    assert count_flops(build_graph(base, (256, 256))) == flop_budget(cfg) == baseline_flops((256, 256))
    assert is_feasible(base, cfg)
    assert is_feasible(archspec.spinenet_s49_spec(), cfg)
    assert not is_feasible(archspec.spinenet_s49_spec(), SearchConfig(flop_budget=1))


def test_random_search_negative_flops():
    cfg = SearchConfig(input_hw=(256, 256))
    ranked = random_search(cfg, 50, flops_evaluator((256, 256)), seed=4)
    assert len(ranked) == 50
    rewards = [r for _, r in ranked]
    assert rewards == sorted(rewards, reverse=True)
    best, reward = ranked[0]
    assert reward == -count_flops(build_graph(candidate_to_spec(best, cfg), (256, 256)))


def test_workers_do_not_change_results():
    cfg = SearchConfig(input_hw=(128, 128))
    ev = flops_evaluator((128, 128))
    one = [r.to_dict() for r in run_trials(cfg, 12, ev, workers=1, seed=9)]
    four = [r.to_dict() for r in run_trials(cfg, 12, ev, workers=4, seed=9)]
    assert one == four


def test_ties_keep_trial_order():
    cfg = SearchConfig(input_hw=(128, 128))
    ranked = random_search(cfg, 6, lambda spec: 1.0, seed=0)
    assert [c for c, _ in ranked] == [sample_candidate([0, t], cfg) for t in range(6)]


def test_infeasible_trials_are_not_scored():
    calls = []
    cfg = SearchConfig(input_hw=(128, 128), flop_budget=1)
    recs = run_trials(cfg, 3, lambda s: calls.append(s) or 0.0)
    assert not calls and not any(r.feasible for r in recs)
    assert random_search(cfg, 3, lambda s: 0.0) == []


def test_command_evaluator(tmp_path):
    script = tmp_path / "score.py"
    script.write_text("import json, sys\nspec = json.load(sys.stdin)\nprint(len(spec['blocks']) / 2)\n")
    ev = CommandEvaluator([sys.executable, str(script)])
    assert ev(archspec.spinenet_s49_spec()) == 11.0
    bad = tmp_path / "bad.py"
    bad.write_text("import sys\nsys.exit(4)\n")
    cfg = SearchConfig(input_hw=(128, 128))
    recs = run_trials(cfg, 2, CommandEvaluator([sys.executable, str(bad)]))
    assert all(r.error and "status 4" in r.error for r in recs)


def test_report_contents():
    cfg = SearchConfig(input_hw=(128, 128))
    recs = run_trials(cfg, 5, flops_evaluator((128, 128)), seed=2)
    rep = search_report(cfg, recs, top_k=3, seed=2)
    assert rep["proxy"] == {"filter_multiplier": 0.5, "image_hw": [384, 384], "steps": 30000, "batch": 64}
    assert rep["trials"] == 5 and len(rep["top"]) == 3
    assert rep["top"][0]["reward"] >= rep["top"][1]["reward"]
    assert rep["search_space"]["permutations"] == str(math.factorial(19))
