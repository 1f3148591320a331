"""Desk-scale multimodal stack: decoder-only LM, grid vision encoder, projector.

The LM is a pre-norm transformer with learned absolute positions, GELU FFNs,
RMS block norms, and no weight tying between the embedding table and the LM
head. Images are discrete symbol grids; the vision encoder emits one token
per cell (single-patch regime) and the projector maps them into the LM width.

Every forward pass runs through ``decode`` against a list of per-layer
``BlockBinding``s. A binding is a view: plain base weights, base weights plus
low-rank adapter factors, or base weights paired with per-token expert
copies. The adapted and expert variants are what the adaptation module and
the deployment router bind; the base model simply binds its own blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "ModelConfig",
    "TokenBatch",
    "BlockBinding",
    "LanguageModel",
    "VisionEncoder",
    "Projector",
    "MultimodalBase",
    "build_model",
    "forward_lm",
    "encode_and_project",
    "block_param_shapes",
    "expected_parameter_count",
]

INIT_STD = 0.02

# matrices that adapters / visual experts attach to, in a fixed order
BLOCK_MATRICES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")
BLOCK_NORMS = ("norm1.g", "norm2.g")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions for the desk model family."""

    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ffn: int = 0  # 0 means 4 * d_model
    max_seq: int = 64
    grid_side: int = 6
    grid_alphabet: int = 16
    d_vision: int = 32
    n_vision_layers: int = 2
    n_vision_heads: int = 2

    def __post_init__(self):
        if self.d_ffn == 0:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        dims = (
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ffn,
            self.max_seq,
            self.grid_side,
            self.grid_alphabet,
            self.d_vision,
            self.n_vision_heads,
        )
        if any(x <= 0 for x in dims) or self.n_vision_layers < 0:
            raise ValueError(f"all config extents must be positive, got {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_vision % self.n_vision_heads:
            raise ValueError(f"d_vision {self.d_vision} not divisible by {self.n_vision_heads} heads")
        if self.n_layers < 4:
            raise ValueError(f"need at least 4 layers for quarter placements, got {self.n_layers}")

    @property
    def grid_cells(self) -> int:
        return self.grid_side * self.grid_side

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ffn": self.d_ffn,
            "max_seq": self.max_seq,
            "grid_side": self.grid_side,
            "grid_alphabet": self.grid_alphabet,
            "d_vision": self.d_vision,
            "n_vision_layers": self.n_vision_layers,
            "n_vision_heads": self.n_vision_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenBatch:
    """Token ids with a per-position modality flag.

    ``image_mask`` is True at image positions, which must form one contiguous
    prefix per row. ``lengths`` gives the real (unpadded) length per row.
    """

    ids: np.ndarray
    image_mask: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.image_mask = np.asarray(self.image_mask, dtype=bool)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape != self.image_mask.shape:
            raise ValueError(f"ids {self.ids.shape} vs image_mask {self.image_mask.shape}")
        if self.lengths.shape != (self.ids.shape[0],):
            raise ValueError("lengths must have one entry per row")
        spans = self.image_mask.sum(axis=1)
        for row, span in enumerate(spans):
            if span and not self.image_mask[row, :span].all():
                raise ValueError(f"row {row}: image positions are not a contiguous prefix")

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    @property
    def image_span(self) -> int:
        """Common prefix span; rows must agree (0 for all-text batches)."""
        spans = self.image_mask.sum(axis=1)
        span = int(spans.max(initial=0))
        if span and not (spans == span).all():
            raise ValueError("rows have differing image spans; batches must be span-uniform")
        return span


@dataclass
class BlockBinding:
    """Resolved weights for one transformer layer.

    ``adapters`` maps a matrix name to (down, up, scale); ``experts`` maps a
    matrix name to a full replacement weight applied at masked positions.
    ``route_adapters`` confines adapter deltas to masked (image) positions,
    which is how the visual-expert baseline keeps text tokens on the exact
    base computation.
    """

    weights: dict[str, Tensor]
    adapters: dict[str, tuple[Tensor, Tensor, float]] = field(default_factory=dict)
    experts: dict[str, Tensor] = field(default_factory=dict)
    route_adapters: bool = False


def _project(x: Tensor, binding: BlockBinding, mat: str, route_mask: np.ndarray | None) -> Tensor:
    w = binding.weights[mat]
    expert = binding.experts.get(mat)
    if expert is not None:
        if route_mask is None:
            raise ValueError("expert binding requires a modality mask")
        return ag.routed_linear(x, w, expert, route_mask)
    y = ag.linear(x, w)
    adapter = binding.adapters.get(mat)
    if adapter is not None:
        down, up, scale = adapter
        if binding.route_adapters:
            if route_mask is None:
                raise ValueError("routed adapters require a modality mask")
            delta = ag.routed_lora(x, down, up, route_mask, scale)
        else:
            delta = ag.linear(ag.linear(x, down), up)
            if scale != 1.0:
                delta = ag.mul(delta, scale)
        y = ag.add(y, delta)
    return y


def block_forward(
    x: Tensor,
    binding: BlockBinding,
    n_heads: int,
    causal: bool = True,
    route_mask: np.ndarray | None = None,
) -> Tensor:
    """Pre-norm block: attention then FFN, each with a residual."""
    h = ag.rms_norm(x, binding.weights["norm1.g"])
    q = _project(h, binding, "attn.wq", route_mask)
    k = _project(h, binding, "attn.wk", route_mask)
    v = _project(h, binding, "attn.wv", route_mask)
    a = ag.attention(q, k, v, n_heads, causal=causal)
    x = ag.add(x, _project(a, binding, "attn.wo", route_mask))
    h = ag.rms_norm(x, binding.weights["norm2.g"])
    f = _project(h, binding, "ffn.w1", route_mask)
    f = ag.gelu(f)
    f = _project(f, binding, "ffn.w2", route_mask)
    return ag.add(x, f)


def block_param_shapes(d: int, d_ffn: int) -> dict[str, tuple[int, ...]]:
    return {
        "attn.wq": (d, d),
        "attn.wk": (d, d),
        "attn.wv": (d, d),
        "attn.wo": (d, d),
        "ffn.w1": (d_ffn, d),
        "ffn.w2": (d, d_ffn),
        "norm1.g": (d,),
        "norm2.g": (d,),
    }


def init_block(rng: np.random.Generator, d: int, d_ffn: int) -> dict[str, Tensor]:
    params = {}
    for name, shape in block_param_shapes(d, d_ffn).items():
        if name in BLOCK_NORMS:
            params[name] = Tensor(np.ones(shape))
        else:
            params[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape))
    return params


class LanguageModel:
    """Decoder-only LM over a flat name -> Tensor parameter store."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "LanguageModel":
        c = config
        params: dict[str, Tensor] = {
            "embed.tokens": Tensor(rng.normal(0.0, INIT_STD, size=(c.vocab_size, c.d_model))),
            "embed.pos": Tensor(rng.normal(0.0, INIT_STD, size=(c.max_seq, c.d_model))),
        }
        for i in range(c.n_layers):
            for name, t in init_block(rng, c.d_model, c.d_ffn).items():
                params[f"blocks.{i}.{name}"] = t
        params["final_norm.g"] = Tensor(np.ones(c.d_model))
        params["head.w"] = Tensor(rng.normal(0.0, INIT_STD, size=(c.vocab_size, c.d_model)))
        return cls(config, params)

    def block_weights(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def base_bindings(self) -> list[BlockBinding]:
        return [BlockBinding(self.block_weights(i)) for i in range(self.config.n_layers)]

    def forward(self, batch: TokenBatch, injected: Tensor | None = None) -> Tensor:
        return decode(self.config, self.params, self.base_bindings(), batch, injected)


def decode(
    config: ModelConfig,
    lm_params: dict[str, Tensor],
    bindings: list[BlockBinding],
    batch: TokenBatch,
    injected: Tensor | None = None,
) -> Tensor:
    """Run the decoder over a batch, injecting image embeddings at the prefix.

    Text positions come from the embedding table; image positions take the
    injected (projector output) embeddings. Returns (B, T, vocab) logits.
    """
    c = config
    bsz, t = batch.ids.shape
    if t > c.max_seq:
        raise ValueError(f"sequence length {t} exceeds max {c.max_seq}")
    if batch.ids.size and batch.ids.max() >= c.vocab_size:
        raise ValueError(f"token id {batch.ids.max()} out of range for vocab {c.vocab_size}")
    if len(bindings) != c.n_layers:
        raise ValueError(f"expected {c.n_layers} block bindings, got {len(bindings)}")
    span = batch.image_span
    if span:
        if injected is None:
            raise ValueError("batch has image positions but no injected embeddings")
        if injected.shape != (bsz, span, c.d_model):
            raise ValueError(f"injected shape {injected.shape} != {(bsz, span, c.d_model)}")
        tok = ag.embed(lm_params["embed.tokens"], batch.ids[:, span:])
        x = ag.concat_seq(injected, tok)
    else:
        x = ag.embed(lm_params["embed.tokens"], batch.ids)
        if injected is not None and injected.size:
            raise ValueError("injected embeddings supplied for an all-text batch")
    # position table is frozen base state, so slicing the raw array is safe
    x = ag.add(x, lm_params["embed.pos"].data[:t])
    routed = any(b.experts or b.route_adapters for b in bindings)
    route_mask = batch.image_mask if routed else None
    for binding in bindings:
        x = block_forward(x, binding, c.n_heads, causal=True, route_mask=route_mask)
    x = ag.rms_norm(x, lm_params["final_norm.g"])
    return ag.linear(x, lm_params["head.w"])


class VisionEncoder:
    """Two bidirectional blocks over per-cell symbol embeddings."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "VisionEncoder":
        c = config
        params: dict[str, Tensor] = {
            "sym_embed": Tensor(rng.normal(0.0, INIT_STD, size=(c.grid_alphabet, c.d_vision))),
            "pos_embed": Tensor(rng.normal(0.0, INIT_STD, size=(c.grid_cells, c.d_vision))),
        }
        for i in range(c.n_vision_layers):
            for name, t in init_block(rng, c.d_vision, 4 * c.d_vision).items():
                params[f"blocks.{i}.{name}"] = t
        params["final_norm.g"] = Tensor(np.ones(c.d_vision))
        return cls(config, params)

    def encode(self, grids: np.ndarray) -> Tensor:
        """Grids (B, side, side) of symbol ids -> (B, cells, d_vision)."""
        c = self.config
        grids = np.asarray(grids)
        if grids.ndim == 2:
            grids = grids[None]
        if grids.shape[1:] != (c.grid_side, c.grid_side):
            raise ValueError(f"grid shape {grids.shape[1:]} != {(c.grid_side, c.grid_side)}")
        if grids.min() < 0 or grids.max() >= c.grid_alphabet:
            raise ValueError(f"grid symbol out of alphabet range [0, {c.grid_alphabet})")
        flat = grids.reshape(grids.shape[0], -1)
        x = ag.embed(self.params["sym_embed"], flat)
        x = ag.add(x, self.params["pos_embed"])
        for i in range(c.n_vision_layers):
            prefix = f"blocks.{i}."
            weights = {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}
            x = block_forward(x, BlockBinding(weights), c.n_vision_heads, causal=False)
        return ag.rms_norm(x, self.params["final_norm.g"])


class Projector:
    """Two-layer GELU MLP from vision width into the LM width."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], pretrained: bool = False):
        self.config = config
        self.params = params
        self.pretrained = pretrained  # set by a completed stage-1 run

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "Projector":
        c = config
        params = {
            "p1.w": Tensor(rng.normal(0.0, INIT_STD, size=(c.d_model, c.d_vision))),
            "p1.b": Tensor(np.zeros(c.d_model)),
            "p2.w": Tensor(rng.normal(0.0, INIT_STD, size=(c.d_model, c.d_model))),
            "p2.b": Tensor(np.zeros(c.d_model)),
        }
        return cls(config, params)

    def project(self, x: Tensor) -> Tensor:
        h = ag.add(ag.linear(x, self.params["p1.w"]), self.params["p1.b"])
        h = ag.gelu(h)
        return ag.add(ag.linear(h, self.params["p2.w"]), self.params["p2.b"])


@dataclass
class MultimodalBase:
    """The frozen-candidate base stack: LM + vision encoder + projector."""

    config: ModelConfig
    lm: LanguageModel
    vision: VisionEncoder
    projector: Projector

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"lm.{k}": v for k, v in self.lm.params.items()}
        out.update({f"vision.{k}": v for k, v in self.vision.params.items()})
        out.update({f"projector.{k}": v for k, v in self.projector.params.items()})
        return out

    def forward(self, batch: TokenBatch, grids: np.ndarray | None = None) -> Tensor:
        injected = None
        if batch.image_span:
            if grids is None:
                raise ValueError("batch has image positions but no grids were supplied")
            injected = encode_and_project(self.vision, self.projector, grids)
        return self.lm.forward(batch, injected)


def build_model(config: ModelConfig, seed: int) -> MultimodalBase:
    """Deterministically initialize a base stack from a seed."""
    rng = np.random.default_rng(seed)
    lm = LanguageModel.build(config, rng)
    vision = VisionEncoder.build(config, rng)
    projector = Projector.build(config, rng)
    return MultimodalBase(config, lm, vision, projector)


def forward_lm(model: MultimodalBase | LanguageModel, batch: TokenBatch, injected: Tensor | None = None) -> Tensor:
    """Logits for a batch, with injected embeddings at image positions."""
    lm = model.lm if isinstance(model, MultimodalBase) else model
    return lm.forward(batch, injected)


def encode_and_project(vision: VisionEncoder, projector: Projector, grids: np.ndarray) -> Tensor:
    """Grid(s) -> LM-width embedding sequence, one vector per cell."""
    return projector.project(vision.encode(grids))


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a base stack (see enumeration tests)."""
    c = config
    block = 4 * c.d_model**2 + 2 * c.d_model * c.d_ffn + 2 * c.d_model
    lm = (
        c.vocab_size * c.d_model  # token embeddings
        + c.max_seq * c.d_model  # positions
        + c.n_layers * block
        + c.d_model  # final norm
        + c.vocab_size * c.d_model  # head
    )
    vblock = 4 * c.d_vision**2 + 2 * c.d_vision * (4 * c.d_vision) + 2 * c.d_vision
    vision = (
        c.grid_alphabet * c.d_vision
        + c.grid_cells * c.d_vision
        + c.n_vision_layers * vblock
        + c.d_vision
    )
    projector = c.d_model * c.d_vision + c.d_model + c.d_model * c.d_model + c.d_model
    return lm + vision + projector
