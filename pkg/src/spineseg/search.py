"""Joint search space over block permutation, long-range connections, level
adjustments and dilation ratios, plus a seeded random-search driver."""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .analysis import count_flops
from .archspec import (
    ADJUSTMENT_DOMAIN,
    DILATION_DOMAIN,
    INITIAL,
    INTERMEDIATE,
    MIN_LEVEL,
    OUTPUT,
    PASCAL_ASPP_RATES,
    S49_TABLE,
    BlockSpec,
    ModelSpec,
    level_dim,
    resnet_s50_spec,
    serialize_spec,
    spec_to_dict,
)
from .graph import build_graph

# Intermediate-block levels of the learned 49-block model: the baseline
# allocation minus two initial L2 blocks and the reserved L3 output block,
# with the nine deepest blocks spread over L5/L6/L7.
DEFAULT_LEVEL_MULTISET = (2, 3, 3, 3, 4, 4, 4, 4, 4, 4, 5, 5, 5, 6, 6, 6, 7, 7, 7)
# Literal reading where all nine deepest blocks sit at L5.
LITERAL_LEVEL_MULTISET = (2, 3, 3, 3, 4, 4, 4, 4, 4, 4, 5, 5, 5, 5, 5, 5, 5, 5, 5)

DEFAULT_INPUT_HW = (512, 512)


class CandidateError(ValueError):
    pass


@dataclass(frozen=True)
class ProxyConfig:
    """Reduced-cost training setup used to score candidates."""

    filter_multiplier: float = 0.5
    image_hw: tuple[int, int] = (384, 384)
    steps: int = 30000
    batch: int = 64

    def to_dict(self) -> dict:
        return {
            "filter_multiplier": self.filter_multiplier,
            "image_hw": list(self.image_hw),
            "steps": self.steps,
            "batch": self.batch,
        }


@dataclass(frozen=True)
class SearchConfig:
    level_multiset: tuple[int, ...] = DEFAULT_LEVEL_MULTISET
    m: int = 2
    adjustment_domain: tuple[int, ...] = ADJUSTMENT_DOMAIN
    dilation_domain: tuple[int, ...] = DILATION_DOMAIN
    flop_budget: Optional[int] = None  # None: baseline FLOPs at the evaluated input size
    input_hw: tuple[int, int] = DEFAULT_INPUT_HW
    output_level: int = 3
    num_classes: int = 21
    aspp_rates: tuple[int, ...] = PASCAL_ASPP_RATES
    proxy: ProxyConfig = field(default_factory=ProxyConfig)

    def __post_init__(self):
        for name in ("level_multiset", "adjustment_domain", "dilation_domain", "input_hw", "aspp_rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.level_multiset or not self.adjustment_domain or not self.dilation_domain:
            raise ValueError("level multiset and domains must be non-empty")

    @property
    def n(self) -> int:
        return len(self.level_multiset)

    def to_dict(self) -> dict:
        d = {
            "level_multiset": list(self.level_multiset),
            "m": self.m,
            "adjustment_domain": list(self.adjustment_domain),
            "dilation_domain": list(self.dilation_domain),
            "flop_budget": self.flop_budget,
            "input_hw": list(self.input_hw),
            "output_level": self.output_level,
            "num_classes": self.num_classes,
            "aspp_rates": list(self.aspp_rates),
            "proxy": self.proxy.to_dict(),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset == "literal":
            d.setdefault("level_multiset", LITERAL_LEVEL_MULTISET)
        elif preset not in (None, "default"):
            raise ValueError(f"unknown preset {preset!r}")
        if "proxy" in d:
            p = dict(d["proxy"])
            if "image_hw" in p:
                p["image_hw"] = tuple(p["image_hw"])
            d["proxy"] = ProxyConfig(**p)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config field(s) {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Candidate:
    """One point of the search space.

    ``permutation`` indexes into the config's level multiset. Per-block lists
    are aligned with the permuted intermediate blocks, whose global ids start
    at ``m``.
    """

    permutation: tuple[int, ...]
    long_range: tuple[int, ...]
    adjustments: tuple[int, ...]
    dilations: tuple[int, ...]
    output_connection: int
    output_dilation: int = 1

    def to_dict(self) -> dict:
        return {
            "permutation": list(self.permutation),
            "long_range": list(self.long_range),
            "adjustments": list(self.adjustments),
            "dilations": list(self.dilations),
            "output_connection": self.output_connection,
            "output_dilation": self.output_dilation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(
            permutation=tuple(d["permutation"]),
            long_range=tuple(d["long_range"]),
            adjustments=tuple(d["adjustments"]),
            dilations=tuple(d["dilations"]),
            output_connection=d["output_connection"],
            output_dilation=d.get("output_dilation", 1),
        )


# -- search space size ----------------------------------------------------------


def search_space_size(config: SearchConfig) -> dict[str, int]:
    """Exact component sizes: N!, prod_{i=m}^{N+m-1} i, a^N, d^N and their product."""
    n, m = config.n, config.m
    perms = math.factorial(n)
    conns = math.prod(range(m, n + m))
    adjs = len(config.adjustment_domain) ** n
    dils = len(config.dilation_domain) ** n
    return {
        "permutations": perms,
        "connections": conns,
        "adjustments": adjs,
        "dilations": dils,
        "total": perms * conns * adjs * dils,
    }


def two_connection_count(config: SearchConfig) -> int:
    """Connection count when every block picks two inputs among its predecessors."""
    return math.prod(math.comb(i, 2) for i in range(config.m, config.n + config.m))


def enumerate_candidates(config: SearchConfig, output_choices: bool = False) -> Iterator[Candidate]:
    """Yield every point of the search space (exhaustive, for small configs)."""
    n, m = config.n, config.m
    conn_ranges = [range(p + m) for p in range(n)]
    out_conns = range(n + m) if output_choices else (n + m - 1,)
    out_dils = config.dilation_domain if output_choices else (1,)
    for perm in itertools.permutations(range(n)):
        for lr in itertools.product(*conn_ranges):
            for adj in itertools.product(config.adjustment_domain, repeat=n):
                for dil in itertools.product(config.dilation_domain, repeat=n):
                    for oc in out_conns:
                        for od in out_dils:
                            yield Candidate(perm, lr, adj, dil, oc, od)


# -- sampling and conversion -------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_candidate(rng_seed, config: SearchConfig) -> Candidate:
    """Draw every component uniformly and independently.

    ``rng_seed`` is an int, a sequence of ints (e.g. ``(seed, trial)``) or a
    numpy Generator.
    """
    rng = _rng(rng_seed)
    n, m = config.n, config.m
    perm = tuple(int(i) for i in rng.permutation(n))
    long_range = tuple(int(rng.integers(0, p + m)) for p in range(n))
    adjustments = []
    for p in range(n):
        a = int(config.adjustment_domain[rng.integers(len(config.adjustment_domain))])
        if config.level_multiset[perm[p]] + a < MIN_LEVEL:
            a = 0
        adjustments.append(a)
    dilations = tuple(int(config.dilation_domain[rng.integers(len(config.dilation_domain))]) for _ in range(n))
    out_conn = int(rng.integers(0, n + m))
    out_dil = int(config.dilation_domain[rng.integers(len(config.dilation_domain))])
    return Candidate(perm, long_range, tuple(adjustments), dilations, out_conn, out_dil)


def check_candidate(candidate: Candidate, config: SearchConfig) -> None:
    n, m = config.n, config.m
    c = candidate
    if sorted(c.permutation) != list(range(n)):
        raise CandidateError(f"permutation must reorder 0..{n - 1}, got {c.permutation}")
    for name in ("long_range", "adjustments", "dilations"):
        if len(getattr(c, name)) != n:
            raise CandidateError(f"{name} must have {n} entries")
    for p, lr in enumerate(c.long_range):
        if not 0 <= lr < p + m:
            raise CandidateError(f"block {p + m}: long-range input {lr} is not an earlier block")
    for p, a in enumerate(c.adjustments):
        if a not in config.adjustment_domain:
            raise CandidateError(f"block {p + m}: adjustment {a} not in {config.adjustment_domain}")
        if config.level_multiset[c.permutation[p]] + a < MIN_LEVEL:
            raise CandidateError(f"block {p + m}: adjusted level below L{MIN_LEVEL}")
    for p, d in enumerate(c.dilations):
        if d not in config.dilation_domain:
            raise CandidateError(f"block {p + m}: dilation {d} not in {config.dilation_domain}")
    if not 0 <= c.output_connection < n + m:
        raise CandidateError(f"output connection {c.output_connection} out of range")
    if c.output_dilation not in config.dilation_domain:
        raise CandidateError(f"output dilation {c.output_dilation} not in {config.dilation_domain}")


def candidate_to_spec(candidate: Candidate, config: SearchConfig, num_classes: Optional[int] = None) -> ModelSpec:
    check_candidate(candidate, config)
    n, m = config.n, config.m
    blocks = [BlockSpec(id=i, base_level=2, feature_dim=level_dim(2), kind=INITIAL) for i in range(m)]
    for p in range(n):
        level = config.level_multiset[candidate.permutation[p]]
        adj = candidate.adjustments[p]
        blocks.append(
            BlockSpec(
                id=m + p,
                base_level=level,
                long_range_input=candidate.long_range[p],
                level_adjustment=adj,
                dilation=candidate.dilations[p],
                feature_dim=level_dim(level + adj),
            )
        )
    blocks.append(
        BlockSpec(
            id=n + m,
            base_level=config.output_level,
            long_range_input=candidate.output_connection,
            dilation=candidate.output_dilation,
            feature_dim=level_dim(config.output_level),
            kind=OUTPUT,
        )
    )
    return ModelSpec(
        blocks=tuple(blocks),
        output_stride=2**config.output_level,
        aspp_rates=config.aspp_rates,
        num_classes=config.num_classes if num_classes is None else num_classes,
    )


def spec_to_candidate(spec: ModelSpec, config: SearchConfig) -> Candidate:
    """Inverse of :func:`candidate_to_spec` for specs shaped like search outputs."""
    m = config.m
    inter = spec.blocks[m:-1]
    if len(inter) != config.n:
        raise CandidateError(f"spec has {len(inter)} intermediate blocks, config expects {config.n}")
    pool: dict[int, list[int]] = {}
    for idx, level in enumerate(config.level_multiset):
        pool.setdefault(level, []).append(idx)
    perm = []
    for b in inter:
        if not pool.get(b.base_level):
            raise CandidateError(f"block {b.id}: level L{b.base_level} not available in the level multiset")
        perm.append(pool[b.base_level].pop(0))
    out = spec.blocks[-1]
    return Candidate(
        permutation=tuple(perm),
        long_range=tuple(b.id - 1 if b.long_range_input is None else b.long_range_input for b in inter),
        adjustments=tuple(b.level_adjustment for b in inter),
        dilations=tuple(b.dilation for b in inter),
        output_connection=out.id - 1 if out.long_range_input is None else out.long_range_input,
        output_dilation=out.dilation,
    )


def s49_candidate(config: Optional[SearchConfig] = None) -> Candidate:
    """The learned 49-block architecture expressed as a candidate of the default space."""
    from .archspec import spinenet_s49_spec

    return spec_to_candidate(spinenet_s49_spec(), config or SearchConfig())


# -- feasibility -----------------------------------------------------------------


@lru_cache(maxsize=64)
def baseline_flops(input_hw: tuple[int, int], num_classes: int = 21, aspp_rates=PASCAL_ASPP_RATES) -> int:
    return count_flops(build_graph(resnet_s50_spec(num_classes, aspp_rates), tuple(input_hw)))


def flop_budget(config: SearchConfig, input_hw: Optional[tuple[int, int]] = None) -> int:
    if config.flop_budget is not None:
        return config.flop_budget
    hw = tuple(input_hw or config.input_hw)
    return baseline_flops(hw, config.num_classes, config.aspp_rates)


def is_feasible(spec: ModelSpec, config: SearchConfig, input_hw: Optional[tuple[int, int]] = None) -> bool:
    hw = tuple(input_hw or config.input_hw)
    return count_flops(build_graph(spec, hw)) <= flop_budget(config, hw)


# -- evaluators ------------------------------------------------------------------


def flops_evaluator(input_hw: tuple[int, int] = DEFAULT_INPUT_HW) -> Callable[[ModelSpec], float]:
    """Cost-only stand-in reward: negative FLOPs at ``input_hw``."""

    def evaluate(spec: ModelSpec) -> float:
        return -float(count_flops(build_graph(spec, tuple(input_hw))))

    evaluate.__name__ = "flops"
    return evaluate


class CommandEvaluator:
    """Scores a spec by running an external program.

    The spec JSON is written to the program's stdin; it must print a single
    decimal reward on stdout and exit 0.
    """

    def __init__(self, command: Sequence[str] | str, timeout: Optional[float] = None):
        self.command = [command] if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, spec: ModelSpec) -> float:
        proc = subprocess.run(
            self.command,
            input=serialize_spec(spec),
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            reward = float(proc.stdout.strip())
        except ValueError:
            raise RuntimeError(f"evaluator printed a non-numeric reward: {proc.stdout.strip()[:200]!r}") from None
        return reward


# -- driver ----------------------------------------------------------------------


@dataclass
class TrialRecord:
    trial: int
    seed: list[int]
    candidate: Candidate
    feasible: bool
    reward: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "trial": self.trial,
            "seed": self.seed,
            "candidate": self.candidate.to_dict(),
            "feasible": self.feasible,
            "reward": self.reward,
        }
        if self.error is not None:
            d["error"] = self.error
        return d


def run_trial(trial: int, seed: int, config: SearchConfig, evaluator) -> TrialRecord:
    stream = [seed, trial]
    cand = sample_candidate(stream, config)
    spec = candidate_to_spec(cand, config)
    rec = TrialRecord(trial, stream, cand, feasible=is_feasible(spec, config))
    if not rec.feasible:
        return rec
    try:
        reward = float(evaluator(spec))
        if not math.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        rec.reward = reward
    except Exception as exc:  # evaluator failures are recorded, not fatal
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def run_trials(config: SearchConfig, trials: int, evaluator, workers: int = 1, seed: int = 0) -> list[TrialRecord]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if workers <= 1:
        return [run_trial(t, seed, config, evaluator) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: run_trial(t, seed, config, evaluator), range(trials)))


def rank(records: Sequence[TrialRecord]) -> list[tuple[Candidate, float]]:
    scored = [r for r in records if r.feasible and r.reward is not None]
    scored.sort(key=lambda r: (-r.reward, r.trial))
    return [(r.candidate, r.reward) for r in scored]


def random_search(config: SearchConfig, trials: int, evaluator=None, workers: int = 1,
                  seed: int = 0) -> list[tuple[Candidate, float]]:
    """Sample ``trials`` candidates, score the feasible ones, best first.

    Ties keep trial order. Each trial draws from its own ``(seed, trial)``
    stream, so the result does not depend on ``workers``.
    """
    evaluator = evaluator or flops_evaluator(config.input_hw)
    return rank(run_trials(config, trials, evaluator, workers, seed))


def search_report(config: SearchConfig, records: Sequence[TrialRecord], top_k: int = 10, seed: int = 0,
                  evaluator_name: str = "flops") -> dict:
    ranked = rank(records)
    by_candidate = {id(r.candidate): r for r in records}
    top = []
    for cand, reward in ranked[:top_k]:
        r = by_candidate[id(cand)]
        top.append({"trial": r.trial, "reward": reward, "candidate": cand.to_dict(),
                    "spec": spec_to_dict(candidate_to_spec(cand, config))})
    return {
        "seed": seed,
        "trials": len(records),
        "feasible": sum(r.feasible for r in records),
        "infeasible": sum(not r.feasible for r in records),
        "failed": sum(r.error is not None for r in records),
        "evaluator": evaluator_name,
        "flop_budget": flop_budget(config),
        "search_space": {k: str(v) for k, v in search_space_size(config).items()},
        "config": config.to_dict(),
        "proxy": config.proxy.to_dict(),
        "top": top,
    }
