"""Declarative architecture specs for scale-permuted segmentation networks.

A :class:`ModelSpec` is an ordered list of :class:`BlockSpec` rows plus the
head configuration. Specs are immutable; every transformation returns a new
spec. Feature dims stored on blocks are unscaled; ``filter_multiplier`` is
applied when the spec is lowered to a graph.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

BOTTLENECK = "bottleneck"
INVERTED_BOTTLENECK = "inverted_bottleneck"
FAMILIES = (BOTTLENECK, INVERTED_BOTTLENECK)

INITIAL = "initial"
INTERMEDIATE = "intermediate"
OUTPUT = "output"
KINDS = (INITIAL, INTERMEDIATE, OUTPUT)

ADJUSTMENT_DOMAIN = (-1, 0)
DILATION_DOMAIN = (1, 2, 4)
OUTPUT_STRIDES = (4, 8, 16)
MIN_LEVEL, MAX_LEVEL = 1, 7

# Levels >= 5 share the L5 width.
LEVEL_DIMS = {1: 32, 2: 64, 3: 128, 4: 256, 5: 512, 6: 512, 7: 512}
MOBILE_LEVEL_DIMS = {1: 16, 2: 24, 3: 40, 4: 80, 5: 112, 6: 112, 7: 112}

PASCAL_ASPP_RATES = (12, 24, 36)
CITYSCAPES_ASPP_RATES = (12, 24, 36, 72)
HEAD_DIM = 256


def level_dim(level: int, family: str = BOTTLENECK) -> int:
    dims = MOBILE_LEVEL_DIMS if family == INVERTED_BOTTLENECK else LEVEL_DIMS
    return dims[min(max(level, MIN_LEVEL), MAX_LEVEL)]


def round_width(width: float, multiplier: float = 1.0) -> int:
    """Scale a channel count and snap it to the nearest multiple of 8 (min 8)."""
    return max(8, int(width * multiplier / 8 + 0.5) * 8)


@dataclass(frozen=True)
class BlockSpec:
    id: int
    base_level: int
    long_range_input: Optional[int] = None
    level_adjustment: int = 0
    dilation: int = 1
    feature_dim: int = 64
    kind: str = INTERMEDIATE
    repeats: int = 1

    @property
    def final_level(self) -> int:
        return self.base_level + self.level_adjustment


@dataclass(frozen=True)
class ModelSpec:
    blocks: tuple[BlockSpec, ...]
    block_family: str = BOTTLENECK
    expansion: int = 4
    filter_multiplier: float = 1.0
    output_stride: int = 8
    aspp_rates: tuple[int, ...] = PASCAL_ASPP_RATES
    head_convs_n: int = 0
    head_dim: int = HEAD_DIM
    num_classes: int = 21

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))

    @property
    def separable_head(self) -> bool:
        """Mobile specs use depthwise-separable convs in ASPP and head."""
        return self.block_family == INVERTED_BOTTLENECK

    @property
    def output_block(self) -> BlockSpec:
        return self.blocks[-1]

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    block_id: Optional[int]
    rule: str
    message: str

    def __str__(self) -> str:
        where = "model" if self.block_id is None else f"block {self.block_id}"
        return f"{where}: [{self.rule}] {self.message}"


class SpecError(ValueError):
    """Raised for malformed spec text or invalid transformation arguments."""


# Table of learned blocks for the 49-block model:
# (base level, long-range input, level adjustment, dilation).
# Rows 0-1 are the initial blocks, row 21 the output block.
S49_TABLE: tuple[tuple[int, Optional[int], int, int], ...] = (
    (2, None, 0, 1),
    (2, None, 0, 1),
    (3, 0, -1, 1),
    (4, 1, -1, 2),
    (3, 1, 0, 1),
    (3, 2, 0, 1),
    (6, 3, 0, 1),
    (6, 5, -1, 2),
    (7, 4, 0, 1),
    (7, 6, 0, 4),
    (5, 6, 0, 1),
    (5, 7, 0, 2),
    (4, 8, 0, 4),
    (4, 9, 0, 1),
    (5, 11, 0, 4),
    (4, 11, 0, 4),
    (4, 12, 0, 1),
    (2, 14, 0, 4),
    (7, 16, -1, 2),
    (6, 15, 0, 1),
    (4, 17, -1, 4),
    (3, 0, 0, 1),
)
# Published feature-dim column, kept separately so it can be cross-checked
# against the level -> dim map.
S49_FEATURE_DIMS = (
    64, 64, 64, 128, 128, 128, 512, 512, 512, 512, 512,
    512, 256, 256, 512, 256, 256, 64, 512, 512, 128, 128,
)


def _kind_for(index: int, total: int, num_initial: int) -> str:
    if index < num_initial:
        return INITIAL
    if index == total - 1:
        return OUTPUT
    return INTERMEDIATE


def spinenet_s49_spec(num_classes: int = 21, aspp_rates: Sequence[int] = PASCAL_ASPP_RATES) -> ModelSpec:
    if num_classes < 1:
        raise SpecError("num_classes must be >= 1")
    blocks = []
    for i, ((level, lr, adj, dil), fd) in enumerate(zip(S49_TABLE, S49_FEATURE_DIMS)):
        blocks.append(
            BlockSpec(
                id=i,
                base_level=level,
                long_range_input=lr,
                level_adjustment=adj,
                dilation=dil,
                feature_dim=fd,
                kind=_kind_for(i, len(S49_TABLE), 2),
            )
        )
    return ModelSpec(
        blocks=tuple(blocks),
        block_family=BOTTLENECK,
        expansion=4,
        filter_multiplier=1.0,
        output_stride=8,
        aspp_rates=tuple(aspp_rates),
        num_classes=num_classes,
    )


def scale_spec(spec: ModelSpec, block_repeats: int, filter_multiplier: float) -> ModelSpec:
    """Repeat every block ``block_repeats`` times and record a width multiplier.

    Replicas are chained sequentially behind the original block; no new
    cross-scale edges are introduced.
    """
    if block_repeats not in (1, 2, 3):
        raise SpecError(f"block_repeats must be 1, 2 or 3, got {block_repeats}")
    if not filter_multiplier > 0:
        raise SpecError(f"filter_multiplier must be positive, got {filter_multiplier}")
    blocks = tuple(dataclasses.replace(b, repeats=block_repeats) for b in spec.blocks)
    return spec.replace(blocks=blocks, filter_multiplier=float(filter_multiplier))


def to_mobile(spec: ModelSpec, filter_scale: float = 1.0) -> ModelSpec:
    if spec.block_family != BOTTLENECK:
        raise SpecError("to_mobile expects a bottleneck-family spec")
    if not filter_scale > 0:
        raise SpecError(f"filter_scale must be positive, got {filter_scale}")
    blocks = tuple(
        dataclasses.replace(b, feature_dim=level_dim(b.final_level, INVERTED_BOTTLENECK))
        for b in spec.blocks
    )
    return spec.replace(
        blocks=blocks,
        block_family=INVERTED_BOTTLENECK,
        expansion=6,
        filter_multiplier=float(filter_scale),
    )


def set_output_stride(spec: ModelSpec, os: int) -> ModelSpec:
    if os not in OUTPUT_STRIDES:
        raise SpecError(f"output stride must be one of {OUTPUT_STRIDES}, got {os}")
    level = int(math.log2(os))
    out = spec.output_block
    new_out = dataclasses.replace(
        out,
        base_level=level,
        level_adjustment=0,
        feature_dim=level_dim(level, spec.block_family),
    )
    return spec.replace(blocks=spec.blocks[:-1] + (new_out,), output_stride=os)


# Stage layout of the sequential baseline: (level, block count, dilation).
# Stages deeper than L4 keep L4 resolution (output stride 16) and use
# dilated 3x3 convs with 512-wide bottlenecks instead of striding.
RESNET_S50_STAGES = ((2, 3, 1), (3, 4, 1), (4, 6, 1), (4, 3, 2), (4, 3, 4), (4, 3, 4))
RESNET_S50_STAGE_DIMS = (64, 128, 256, 512, 512, 512)


def resnet_s50_spec(num_classes: int = 21, aspp_rates: Sequence[int] = PASCAL_ASPP_RATES) -> ModelSpec:
    """Sequential bottleneck baseline used as the search starting point.

    Allocation is 3/4/6 blocks at L2/L3/L4 followed by stage 5 and two
    repeats of it (9 blocks), downsampling at the first block of each stage.
    """
    rows = []
    for (level, count, dilation), dim in zip(RESNET_S50_STAGES, RESNET_S50_STAGE_DIMS):
        rows.extend([(level, dilation, dim)] * count)
    blocks = tuple(
        BlockSpec(
            id=i,
            base_level=level,
            dilation=dilation,
            feature_dim=dim,
            kind=_kind_for(i, len(rows), 1),
        )
        for i, (level, dilation, dim) in enumerate(rows)
    )
    return ModelSpec(
        blocks=blocks,
        output_stride=16,
        aspp_rates=tuple(aspp_rates),
        num_classes=num_classes,
    )


def named_model(
    name: str,
    num_classes: int = 21,
    output_stride: Optional[int] = None,
    aspp_rates: Sequence[int] = PASCAL_ASPP_RATES,
) -> ModelSpec:
    """Build one of the published model variants by CLI name."""
    base = spinenet_s49_spec(num_classes, aspp_rates)
    if name == "s49":
        spec = base
    elif name == "s96":
        spec = scale_spec(base, 2, 1.0)
    elif name == "s143":
        spec = scale_spec(base, 3, 1.0)
    elif name == "s143plus":
        spec = scale_spec(base, 3, 1.3).replace(head_convs_n=2)
    elif name == "mobile-s49":
        spec = to_mobile(base, 1.0)
    elif name == "mobile-s49minus":
        spec = to_mobile(base, 0.65)
    elif name == "resnet-s50":
        spec = resnet_s50_spec(num_classes, aspp_rates)
    else:
        raise SpecError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    if output_stride is not None and output_stride != spec.output_stride:
        spec = set_output_stride(spec, output_stride)
    return spec


MODEL_NAMES = ("s49", "s96", "s143", "s143plus", "mobile-s49", "mobile-s49minus", "resnet-s50")


def validate_spec(spec: ModelSpec) -> list[Violation]:
    """Return every invariant violation in ``spec``; empty means valid."""
    out: list[Violation] = []

    def bad(block_id, rule, msg):
        out.append(Violation(block_id, rule, msg))

    if spec.block_family not in FAMILIES:
        bad(None, "family", f"unknown block family {spec.block_family!r}")
    if spec.output_stride not in OUTPUT_STRIDES:
        bad(None, "output_stride", f"{spec.output_stride} not in {OUTPUT_STRIDES}")
    if not spec.filter_multiplier > 0:
        bad(None, "filter_multiplier", "must be positive")
    if spec.expansion < 1:
        bad(None, "expansion", "must be >= 1")
    if spec.num_classes < 1:
        bad(None, "num_classes", "must be >= 1")
    if spec.head_convs_n < 0:
        bad(None, "head_convs_n", "must be >= 0")
    if spec.head_dim < 1:
        bad(None, "head_dim", "must be >= 1")
    if not spec.aspp_rates:
        bad(None, "aspp_rates", "at least one rate required")
    elif len(set(spec.aspp_rates)) != len(spec.aspp_rates) or min(spec.aspp_rates) < 1:
        bad(None, "aspp_rates", "rates must be distinct positive integers")
    if not spec.blocks:
        bad(None, "blocks", "spec has no blocks")
        return out

    outputs = [b.id for b in spec.blocks if b.kind == OUTPUT]
    if len(outputs) != 1:
        bad(None, "output", f"expected exactly one output block, found {len(outputs)}")
    if spec.blocks[-1].kind != OUTPUT:
        bad(spec.blocks[-1].id, "output", "last block must be the output block")
    elif spec.output_stride in OUTPUT_STRIDES:
        if spec.blocks[-1].final_level != int(math.log2(spec.output_stride)):
            bad(
                spec.blocks[-1].id,
                "output_level",
                f"output block level {spec.blocks[-1].final_level} does not give "
                f"output stride {spec.output_stride}",
            )

    seen_non_initial = False
    for pos, b in enumerate(spec.blocks):
        if b.id != pos:
            bad(b.id, "ids", f"block at position {pos} has id {b.id}; ids must be consecutive from 0")
        if b.kind not in KINDS:
            bad(b.id, "kind", f"unknown kind {b.kind!r}")
        if not MIN_LEVEL <= b.base_level <= MAX_LEVEL:
            bad(b.id, "level", f"base level {b.base_level} outside [{MIN_LEVEL}, {MAX_LEVEL}]")
        if b.level_adjustment not in ADJUSTMENT_DOMAIN:
            bad(b.id, "adjustment_domain", f"adjustment {b.level_adjustment} not in {ADJUSTMENT_DOMAIN}")
        if b.final_level < MIN_LEVEL:
            bad(b.id, "level_floor", f"final level {b.final_level} below L{MIN_LEVEL}")
        if b.dilation not in DILATION_DOMAIN:
            bad(b.id, "dilation_domain", f"dilation {b.dilation} not in {DILATION_DOMAIN}")
        if b.feature_dim < 1:
            bad(b.id, "feature_dim", "must be positive")
        if b.repeats < 1:
            bad(b.id, "repeats", "must be >= 1")
        lr = b.long_range_input
        if lr is not None:
            if lr == b.id:
                bad(b.id, "cycle", "block consumes its own output")
            elif lr > b.id:
                bad(b.id, "cycle", f"long-range input {lr} is not an earlier block")
            elif lr < 0:
                bad(b.id, "dangling", f"long-range input {lr} does not exist")
        if b.kind == INITIAL:
            if seen_non_initial:
                bad(b.id, "initial_order", "initial blocks must precede all others")
            if lr is not None or b.level_adjustment != 0 or b.dilation != 1:
                bad(b.id, "initial", "initial blocks take no long-range input, adjustment 0, dilation 1")
        else:
            seen_non_initial = True
    if spec.blocks[0].kind != INITIAL:
        bad(spec.blocks[0].id, "initial", "first block must be an initial block")
    return out


# -- serialization -----------------------------------------------------------

_MODEL_FIELDS = (
    "family",
    "expansion",
    "filter_multiplier",
    "output_stride",
    "aspp_rates",
    "head_convs_n",
    "head_dim",
    "num_classes",
    "blocks",
)
_BLOCK_FIELDS = ("id", "level", "long_range", "adjustment", "dilation", "feature_dim", "kind", "repeats")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.block_family,
        "expansion": spec.expansion,
        "filter_multiplier": float(spec.filter_multiplier),
        "output_stride": spec.output_stride,
        "aspp_rates": list(spec.aspp_rates),
        "head_convs_n": spec.head_convs_n,
        "head_dim": spec.head_dim,
        "num_classes": spec.num_classes,
        "blocks": [
            {
                "id": b.id,
                "level": b.base_level,
                "long_range": b.long_range_input,
                "adjustment": b.level_adjustment,
                "dilation": b.dilation,
                "feature_dim": b.feature_dim,
                "kind": b.kind,
                "repeats": b.repeats,
            }
            for b in spec.blocks
        ],
    }


def serialize_spec(spec: ModelSpec) -> str:
    """Render ``spec`` as normalized JSON text (fixed key order, one block per line)."""
    d = spec_to_dict(spec)
    blocks = d.pop("blocks")
    lines = ["{"]
    for key, value in d.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value)},")
    lines.append('  "blocks": [')
    for i, b in enumerate(blocks):
        sep = "," if i < len(blocks) - 1 else ""
        lines.append(f"    {json.dumps(b)}{sep}")
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _require_int(obj: dict, key: str, where: str, nullable: bool = False):
    value = obj[key]
    if value is None and nullable:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecError(f"{where}: field {key!r} must be an integer, got {value!r}")
    return value


def spec_from_dict(d: dict) -> ModelSpec:
    if not isinstance(d, dict):
        raise SpecError("spec: top level must be a JSON object")
    unknown = set(d) - set(_MODEL_FIELDS)
    if unknown:
        raise SpecError(f"spec: unknown field(s) {sorted(unknown)}")
    if "blocks" not in d:
        raise SpecError("spec: missing blocks")
    missing = [k for k in _MODEL_FIELDS if k not in d]
    if missing:
        raise SpecError(f"spec: missing field(s) {missing}")
    if not isinstance(d["blocks"], list):
        raise SpecError("spec: field 'blocks' must be a list")
    blocks = []
    for i, raw in enumerate(d["blocks"]):
        where = f"blocks[{i}]"
        if not isinstance(raw, dict):
            raise SpecError(f"{where}: must be an object")
        unknown = set(raw) - set(_BLOCK_FIELDS)
        if unknown:
            raise SpecError(f"{where}: unknown field(s) {sorted(unknown)}")
        missing = [k for k in _BLOCK_FIELDS if k not in raw]
        if missing:
            raise SpecError(f"{where}: missing field(s) {missing}")
        if raw["kind"] not in KINDS:
            raise SpecError(f"{where}: field 'kind' must be one of {KINDS}, got {raw['kind']!r}")
        blocks.append(
            BlockSpec(
                id=_require_int(raw, "id", where),
                base_level=_require_int(raw, "level", where),
                long_range_input=_require_int(raw, "long_range", where, nullable=True),
                level_adjustment=_require_int(raw, "adjustment", where),
                dilation=_require_int(raw, "dilation", where),
                feature_dim=_require_int(raw, "feature_dim", where),
                kind=raw["kind"],
                repeats=_require_int(raw, "repeats", where),
            )
        )
    rates = d["aspp_rates"]
    if not isinstance(rates, list) or not all(isinstance(r, int) and not isinstance(r, bool) for r in rates):
        raise SpecError("spec: field 'aspp_rates' must be a list of integers")
    mult = d["filter_multiplier"]
    if isinstance(mult, bool) or not isinstance(mult, (int, float)):
        raise SpecError("spec: field 'filter_multiplier' must be a number")
    if d["family"] not in FAMILIES:
        raise SpecError(f"spec: field 'family' must be one of {FAMILIES}")
    return ModelSpec(
        blocks=tuple(blocks),
        block_family=d["family"],
        expansion=_require_int(d, "expansion", "spec"),
        filter_multiplier=float(mult),
        output_stride=_require_int(d, "output_stride", "spec"),
        aspp_rates=tuple(rates),
        head_convs_n=_require_int(d, "head_convs_n", "spec"),
        head_dim=_require_int(d, "head_dim", "spec"),
        num_classes=_require_int(d, "num_classes", "spec"),
    )


def parse_spec(text: str) -> ModelSpec:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return spec_from_dict(d)
