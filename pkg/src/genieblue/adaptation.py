"""Hybrid adaptation: block replication placements, LoRA, and visual experts.

A hybrid model keeps the base LM frozen, substitutes fully trainable copies
of the blocks at the scheduled layer indices, and attaches rank-r adapters to
every attention and FFN matrix of the remaining blocks. The multimodal path
swaps whole blocks for all tokens; per-token expert routing exists only in
the visual-expert baseline, whose expert-bearing layers send image positions
through duplicated QKV/output/FFN weights while attention still mixes all
positions jointly.

Adapters are zero at initialization (up factor all-zero) and replicated
blocks are bit-exact copies, so a freshly built model computes exactly what
the base computes on any input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autograd import ShapeMismatch, Tensor
from .model import (
    BLOCK_MATRICES,
    BlockBinding,
    ModelConfig,
    MultimodalBase,
    TokenBatch,
    decode,
    encode_and_project,
)

__all__ = [
    "PlacementSchedule",
    "plan_placement",
    "LoraAdapter",
    "HybridModel",
    "VisualExpertModel",
    "build_genieblue",
    "build_cogvlm",
    "build_full_lora",
    "count_trainable",
    "merge_lora",
    "freeze_mask",
    "parameter_group",
]

PLACEMENT_MODES = ("post", "pre", "skip")
ADAPTER_INIT_STD = 0.02


@dataclass(frozen=True)
class PlacementSchedule:
    """Which layers get full block copies; the complement carries adapters."""

    mode: str
    fraction: Fraction
    replicated: tuple[int, ...]
    complement: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.replicated)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "fraction": [self.fraction.numerator, self.fraction.denominator],
            "replicated": list(self.replicated),
            "complement": list(self.complement),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementSchedule":
        return cls(
            mode=d["mode"],
            fraction=Fraction(*d["fraction"]),
            replicated=tuple(d["replicated"]),
            complement=tuple(d["complement"]),
        )


def plan_placement(n_layers: int, fraction=Fraction(1, 4), mode: str = "skip") -> PlacementSchedule:
    """Choose k = max(1, floor(L*f)) replicated indices per the mode.

    post -> the last k layers; pre -> the first k; skip -> evenly spaced
    with the final layer always included.
    """
    if n_layers < 1:
        raise ValueError(f"need at least one layer, got {n_layers}")
    f = fraction if isinstance(fraction, Fraction) else Fraction(*float(fraction).as_integer_ratio())
    if not (0 < f <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    mode = mode.lower()
    if mode not in PLACEMENT_MODES:
        raise ValueError(f"mode must be one of {PLACEMENT_MODES}, got {mode!r}")
    k = max(1, math.floor(n_layers * f))
    if mode == "post":
        replicated = tuple(range(n_layers - k, n_layers))
    elif mode == "pre":
        replicated = tuple(range(k))
    else:
        replicated = tuple(-(-(j + 1) * n_layers // k) - 1 for j in range(k))
    complement = tuple(i for i in range(n_layers) if i not in set(replicated))
    return PlacementSchedule(mode=mode, fraction=f, replicated=replicated, complement=complement)


def _empty_schedule(n_layers: int) -> PlacementSchedule:
    """Degenerate schedule used by the full-LoRA baseline: no replication."""
    return PlacementSchedule(
        mode="none",
        fraction=Fraction(0, 1),
        replicated=(),
        complement=tuple(range(n_layers)),
    )


@dataclass
class LoraAdapter:
    """Low-rank delta s * up @ down attached to one weight matrix."""

    down: Tensor  # (r, d_in), seeded small-variance init
    up: Tensor  # (d_out, r), zero init
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]


def _init_adapters(
    rng: np.random.Generator, config: ModelConfig, rank: int, indices: tuple[int, ...]
) -> dict[int, dict[str, LoraAdapter]]:
    d, f = config.d_model, config.d_ffn
    dims = {
        "attn.wq": (d, d),
        "attn.wk": (d, d),
        "attn.wv": (d, d),
        "attn.wo": (d, d),
        "ffn.w1": (f, d),
        "ffn.w2": (d, f),
    }
    adapters: dict[int, dict[str, LoraAdapter]] = {}
    for i in indices:
        per_block = {}
        for mat in BLOCK_MATRICES:
            d_out, d_in = dims[mat]
            per_block[mat] = LoraAdapter(
                down=Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, d_in))),
                up=Tensor(np.zeros((d_out, rank))),
            )
        adapters[i] = per_block
    return adapters


def _copy_block(src: dict[str, Tensor], include_norms: bool) -> dict[str, Tensor]:
    out = {}
    for name, t in src.items():
        if not include_norms and name not in BLOCK_MATRICES:
            continue
        out[name] = Tensor(t.data.copy())
    return out


class HybridModel:
    """Frozen base + replicated trainable blocks + adapters on the rest."""

    kind = "genieblue"

    def __init__(
        self,
        base: MultimodalBase,
        schedule: PlacementSchedule,
        rank: int,
        replicated: dict[int, dict[str, Tensor]],
        adapters: dict[int, dict[str, LoraAdapter]],
    ):
        self.config = base.config
        self.base = base
        self.schedule = schedule
        self.rank = rank
        self.replicated = replicated
        self.adapters = adapters

    @property
    def lm(self):
        return self.base.lm

    @property
    def vision(self):
        return self.base.vision

    @property
    def projector(self):
        return self.base.projector

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"lm.{k}": v for k, v in self.lm.params.items()}
        for i, block in sorted(self.replicated.items()):
            out.update({f"replicated.{i}.{k}": v for k, v in block.items()})
        for i, per_block in sorted(self.adapters.items()):
            for mat, a in per_block.items():
                out[f"adapter.{i}.{mat}.down"] = a.down
                out[f"adapter.{i}.{mat}.up"] = a.up
        out.update({f"vision.{k}": v for k, v in self.vision.params.items()})
        out.update({f"projector.{k}": v for k, v in self.projector.params.items()})
        return out

    def bindings(self) -> list[BlockBinding]:
        """The multimodal-path bindings: swapped blocks plus adapted base."""
        out = []
        for i in range(self.config.n_layers):
            if i in self.replicated:
                out.append(BlockBinding(self.replicated[i]))
            else:
                adapters = {
                    mat: (a.down, a.up, a.scale) for mat, a in self.adapters.get(i, {}).items()
                }
                out.append(BlockBinding(self.lm.block_weights(i), adapters=adapters))
        return out

    def forward(self, batch: TokenBatch, grids: np.ndarray | None = None) -> Tensor:
        """Multimodal-path forward: every token flows through the swapped blocks."""
        injected = None
        if batch.image_span:
            if grids is None:
                raise ValueError("batch has image positions but no grids were supplied")
            injected = encode_and_project(self.vision, self.projector, grids)
        return decode(self.config, self.lm.params, self.bindings(), batch, injected)


class VisualExpertModel:
    """Frozen base with per-block expert weights routed by token modality."""

    kind = "cogvlm"

    def __init__(
        self,
        base: MultimodalBase,
        schedule: PlacementSchedule,
        rank: int,
        experts: dict[int, dict[str, Tensor]],
        adapters: dict[int, dict[str, LoraAdapter]],
    ):
        self.config = base.config
        self.base = base
        self.schedule = schedule
        self.rank = rank
        self.experts = experts
        self.adapters = adapters

    @property
    def lm(self):
        return self.base.lm

    @property
    def vision(self):
        return self.base.vision

    @property
    def projector(self):
        return self.base.projector

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"lm.{k}": v for k, v in self.lm.params.items()}
        for i, block in sorted(self.experts.items()):
            out.update({f"expert.{i}.{k}": v for k, v in block.items()})
        for i, per_block in sorted(self.adapters.items()):
            for mat, a in per_block.items():
                out[f"adapter.{i}.{mat}.down"] = a.down
                out[f"adapter.{i}.{mat}.up"] = a.up
        out.update({f"vision.{k}": v for k, v in self.vision.params.items()})
        out.update({f"projector.{k}": v for k, v in self.projector.params.items()})
        return out

    def bindings(self) -> list[BlockBinding]:
        out = []
        for i in range(self.config.n_layers):
            weights = self.lm.block_weights(i)
            if i in self.experts:
                out.append(BlockBinding(weights, experts=dict(self.experts[i])))
            else:
                adapters = {
                    mat: (a.down, a.up, a.scale) for mat, a in self.adapters.get(i, {}).items()
                }
                # adapters are image-routed here: text positions must stay on
                # the exact base computation at every training state
                out.append(BlockBinding(weights, adapters=adapters, route_adapters=True))
        return out

    def forward(self, batch: TokenBatch, grids: np.ndarray | None = None) -> Tensor:
        injected = None
        if batch.image_span:
            if grids is None:
                raise ValueError("batch has image positions but no grids were supplied")
            injected = encode_and_project(self.vision, self.projector, grids)
        return decode(self.config, self.lm.params, self.bindings(), batch, injected)


def _check_rank(rank: int, config: ModelConfig) -> None:
    if rank < 0:
        raise ValueError(f"rank must be non-negative, got {rank}")
    if rank >= config.d_model:
        raise ValueError(f"rank {rank} is degenerate for width {config.d_model}")


def build_genieblue(
    base: MultimodalBase, schedule: PlacementSchedule, rank: int = 8, seed: int = 0
) -> HybridModel:
    """Replicate the scheduled blocks and attach adapters to the complement."""
    _check_rank(rank, base.config)
    if any(i < 0 or i >= base.config.n_layers for i in schedule.replicated):
        raise ValueError(f"schedule {schedule.replicated} out of range for L={base.config.n_layers}")
    replicated = {
        i: _copy_block(base.lm.block_weights(i), include_norms=True) for i in schedule.replicated
    }
    rng = np.random.default_rng(seed)
    adapters = _init_adapters(rng, base.config, rank, schedule.complement) if rank else {}
    return HybridModel(base, schedule, rank, replicated, adapters)


def build_cogvlm(
    base: MultimodalBase, schedule: PlacementSchedule, rank: int = 8, seed: int = 0
) -> VisualExpertModel:
    """Duplicate QKV/output/FFN experts at the scheduled blocks."""
    _check_rank(rank, base.config)
    if any(i < 0 or i >= base.config.n_layers for i in schedule.replicated):
        raise ValueError(f"schedule {schedule.replicated} out of range for L={base.config.n_layers}")
    experts = {
        i: _copy_block(base.lm.block_weights(i), include_norms=False) for i in schedule.replicated
    }
    rng = np.random.default_rng(seed)
    adapters = _init_adapters(rng, base.config, rank, schedule.complement) if rank else {}
    return VisualExpertModel(base, schedule, rank, experts, adapters)


def build_full_lora(base: MultimodalBase, rank: int = 8, seed: int = 0) -> HybridModel:
    """Baseline: adapters on every block, no replication."""
    _check_rank(rank, base.config)
    schedule = _empty_schedule(base.config.n_layers)
    rng = np.random.default_rng(seed)
    adapters = _init_adapters(rng, base.config, rank, schedule.complement) if rank else {}
    return HybridModel(base, schedule, rank, {}, adapters)


def parameter_group(name: str) -> str:
    """Which of {base, replicated, adapter, vision, projector} a name is in."""
    if name.startswith("lm."):
        return "base"
    if name.startswith("replicated.") or name.startswith("expert."):
        return "replicated"
    for group in ("adapter", "vision", "projector"):
        if name.startswith(group + "."):
            return group
    raise ValueError(f"unknown parameter group for {name!r}")


def count_trainable(model) -> dict[str, int]:
    """Trainable parameter counts by group, plus the total.

    For the full-finetune baseline (a plain ``MultimodalBase``), every
    parameter including the LM is trainable and counts under ``blocks``.
    """
    counts = {"blocks": 0, "adapters": 0, "vision": 0, "projector": 0}
    if isinstance(model, MultimodalBase):
        for name, p in model.named_parameters().items():
            if name.startswith("vision."):
                counts["vision"] += p.size
            elif name.startswith("projector."):
                counts["projector"] += p.size
            else:
                counts["blocks"] += p.size
    else:
        for name, p in model.named_parameters().items():
            group = parameter_group(name)
            if group == "base":
                continue
            key = {"replicated": "blocks", "adapter": "adapters"}.get(group, group)
            counts[key] += p.size
    counts["total"] = sum(counts.values())
    return counts


def merge_lora(weight, adapter: LoraAdapter) -> np.ndarray:
    """Materialize W + s * up @ down."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=np.float64)
    delta = adapter.up.data @ adapter.down.data
    if delta.shape != w.shape:
        raise ShapeMismatch(f"merge_lora: delta {delta.shape} vs weight {w.shape}")
    return w + adapter.scale * delta


def merged_bindings(model: HybridModel) -> list[BlockBinding]:
    """Bindings with every adapter folded into its base weight."""
    out = []
    for i in range(model.config.n_layers):
        if i in model.replicated:
            out.append(BlockBinding(model.replicated[i]))
            continue
        weights = dict(model.lm.block_weights(i))
        for mat, a in model.adapters.get(i, {}).items():
            weights[mat] = Tensor(merge_lora(weights[mat], a))
        out.append(BlockBinding(weights))
    return out


def freeze_mask(model, stage: int) -> dict[str, Tensor]:
    """The trainable parameter set for a training stage.

    Stage 1 trains the projector alone. Stage 2 trains vision, projector,
    replicated/expert blocks, and adapters. Base LM blocks, embeddings, and
    the LM head are never trainable for hybrid and expert models; the
    full-finetune baseline trains everything in stage 2.
    """
    if stage not in (1, 2):
        raise ValueError(f"unknown training stage {stage!r}")
    params = model.named_parameters()
    if stage == 1:
        return {n: p for n, p in params.items() if n.startswith("projector.")}
    if isinstance(model, MultimodalBase):
        return dict(params)
    return {n: p for n, p in params.items() if parameter_group(n) != "base"}
