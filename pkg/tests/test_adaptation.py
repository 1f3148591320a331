from fractions import Fraction

import numpy as np
import pytest

from genieblue.adaptation import (
    LoraAdapter,
    build_cogvlm,
    build_full_lora,
    build_genieblue,
    count_trainable,
    freeze_mask,
    merge_lora,
    merged_bindings,
    plan_placement,
)
from genieblue.autograd import ShapeMismatch, Tensor
from genieblue.model import ModelConfig, TokenBatch, build_model, decode, encode_and_project

from oracles import layers_from_bindings, ref_decode


def _mixed_batch(rng, config, bsz=2, t=None):
    t = t or config.max_seq
    span = config.grid_cells
    ids = rng.integers(0, config.vocab_size, size=(bsz, t))
    mask = np.zeros((bsz, t), dtype=bool)
    mask[:, :span] = True
    grids = rng.integers(0, config.grid_alphabet, size=(bsz, config.grid_side, config.grid_side))
    return TokenBatch(ids, mask, np.full(bsz, t)), grids


def _text_batch(rng, config, bsz=2, t=8):
    ids = rng.integers(0, config.vocab_size, size=(bsz, t))
    return TokenBatch(ids, np.zeros((bsz, t), dtype=bool), np.full(bsz, t))


# ----------------------------------------------------------------------------
# placement planning
# ----------------------------------------------------------------------------


def test_placement_skip_8_quarter():
    assert plan_placement(8, Fraction(1, 4), "skip").replicated == (3, 7)


def test_placement_pre_post_8_quarter():
    assert plan_placement(8, Fraction(1, 4), "pre").replicated == (0, 1)
    assert plan_placement(8, Fraction(1, 4), "post").replicated == (6, 7)


def test_placement_skip_10_quarter():
    sched = plan_placement(10, Fraction(1, 4), "skip")
    assert sched.k == 2
    assert sched.replicated == (4, 9)


def test_placement_accepts_plain_floats():
    assert plan_placement(8, 0.25, "skip").replicated == (3, 7)


@pytest.mark.parametrize("n_layers", range(4, 13))
@pytest.mark.parametrize("mode", ["post", "pre", "skip"])
def test_placement_partition_invariants(n_layers, mode):
    sched = plan_placement(n_layers, Fraction(1, 4), mode)
    assert sched.k == max(1, (n_layers * 1) // 4)
    assert set(sched.replicated) | set(sched.complement) == set(range(n_layers))
    assert set(sched.replicated) & set(sched.complement) == set()
    assert sched.replicated == tuple(sorted(sched.replicated))
    if mode == "skip":
        assert sched.replicated[-1] == n_layers - 1  # final block always included


def test_placement_rejects_bad_fraction():
    with pytest.raises(ValueError):
        plan_placement(8, 0.0)
    with pytest.raises(ValueError):
        plan_placement(8, 1.5)


def test_placement_full_fraction_replicates_everything():
    sched = plan_placement(6, Fraction(1, 1), "skip")
    assert sched.replicated == tuple(range(6))
    assert sched.complement == ()


def test_placement_roundtrip_dict():
    sched = plan_placement(8, Fraction(1, 4), "skip")
    from genieblue.adaptation import PlacementSchedule

    assert PlacementSchedule.from_dict(sched.to_dict()) == sched


# ----------------------------------------------------------------------------
# hybrid construction
# ----------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["post", "pre", "skip"])
def test_genieblue_init_equivalence_bit_exact(tiny_base, rng, mode):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), mode)
    hybrid = build_genieblue(tiny_base, sched, rank=4, seed=1)
    for _ in range(5):
        batch, grids = _mixed_batch(rng, tiny_base.config)
        assert (
            hybrid.forward(batch, grids).data.tobytes()
            == tiny_base.forward(batch, grids).data.tobytes()
        )


@pytest.mark.parametrize("mode", ["post", "pre", "skip"])
def test_cogvlm_init_equivalence_bit_exact(tiny_base, rng, mode):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), mode)
    expert = build_cogvlm(tiny_base, sched, rank=4, seed=1)
    for _ in range(5):
        batch, grids = _mixed_batch(rng, tiny_base.config)
        assert (
            expert.forward(batch, grids).data.tobytes()
            == tiny_base.forward(batch, grids).data.tobytes()
        )


def test_replicated_block_count_for_skip():
    base = build_model(ModelConfig(), seed=0)
    hybrid = build_genieblue(base, plan_placement(8, Fraction(1, 4), "skip"), rank=8)
    assert len(hybrid.replicated) == 2


def test_perturbing_replicated_block_isolates_base_path(tiny_base, rng):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    hybrid = build_genieblue(tiny_base, sched, rank=4)
    batch, grids = _mixed_batch(rng, tiny_base.config)
    before_mm = hybrid.forward(batch, grids).data
    text = _text_batch(rng, tiny_base.config)
    before_text = tiny_base.lm.forward(text).data

    idx = sched.replicated[0]
    hybrid.replicated[idx]["attn.wq"].data += 0.05

    after_mm = hybrid.forward(batch, grids).data
    after_text = tiny_base.lm.forward(text).data
    assert not np.array_equal(before_mm, after_mm)
    assert before_text.tobytes() == after_text.tobytes()


def test_degenerate_rank_rejected(tiny_base):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    with pytest.raises(ValueError, match="degenerate"):
        build_genieblue(tiny_base, sched, rank=tiny_base.config.d_model)


def test_adapter_zero_at_init(tiny_base):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    hybrid = build_genieblue(tiny_base, sched, rank=4, seed=5)
    for per_block in hybrid.adapters.values():
        for adapter in per_block.values():
            assert not adapter.up.data.any()
            assert adapter.down.data.any()  # seeded noise, not zero
            delta = adapter.up.data @ adapter.down.data
            assert not delta.any()


# ----------------------------------------------------------------------------
# cogvlm routing
# ----------------------------------------------------------------------------


def test_cogvlm_text_batch_never_reaches_experts(tiny_base, rng):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    expert = build_cogvlm(tiny_base, sched, rank=4)
    for per_block in expert.experts.values():
        for t in per_block.values():
            t.data[:] = np.nan  # poison: must be unreachable for text tokens
    batch = _text_batch(rng, tiny_base.config)
    out = expert.forward(batch).data
    assert np.isfinite(out).all()
    assert out.tobytes() == tiny_base.lm.forward(batch).data.tobytes()


def test_cogvlm_all_image_at_init_equals_base(tiny_base, rng):
    cfg = tiny_base.config
    sched = plan_placement(cfg.n_layers, Fraction(1, 4), "skip")
    expert = build_cogvlm(tiny_base, sched, rank=4)
    span = cfg.grid_cells
    ids = np.full((2, span), 0, dtype=np.int64)
    mask = np.ones((2, span), dtype=bool)
    batch = TokenBatch(ids, mask, np.full(2, span))
    grids = rng.integers(0, cfg.grid_alphabet, size=(2, cfg.grid_side, cfg.grid_side))
    assert (
        expert.forward(batch, grids).data.tobytes()
        == tiny_base.forward(batch, grids).data.tobytes()
    )


def test_cogvlm_mixed_routing_matches_dense_reference(tiny_base, rng):
    cfg = tiny_base.config
    sched = plan_placement(cfg.n_layers, Fraction(1, 4), "skip")
    expert = build_cogvlm(tiny_base, sched, rank=4, seed=2)
    # perturb the experts and adapters so routing actually matters
    for per_block in expert.experts.values():
        for t in per_block.values():
            t.data += rng.normal(scale=0.05, size=t.shape)
    for per_block in expert.adapters.values():
        for a in per_block.values():
            a.up.data += rng.normal(scale=0.05, size=a.up.shape)
    batch, grids = _mixed_batch(rng, cfg)
    injected = encode_and_project(expert.vision, expert.projector, grids)
    got = decode(cfg, expert.lm.params, expert.bindings(), batch, injected).data
    ref = ref_decode(
        {k: v.data for k, v in expert.lm.params.items()},
        layers_from_bindings(expert.bindings()),
        batch.ids,
        batch.image_mask,
        injected.data,
        cfg.n_heads,
    )
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


# ----------------------------------------------------------------------------
# trainable-parameter accounting
# ----------------------------------------------------------------------------


def test_count_parity_across_placements():
    base = build_model(ModelConfig(), seed=0)
    totals = []
    for mode in ("post", "pre", "skip"):
        model = build_genieblue(base, plan_placement(8, Fraction(1, 4), mode), rank=8)
        totals.append(count_trainable(model)["total"])
    assert totals[0] == totals[1] == totals[2]


def test_count_zero_rank_empty_replication():
    base = build_model(ModelConfig(), seed=0)
    model = build_full_lora(base, rank=0)
    counts = count_trainable(model)
    assert counts["blocks"] == 0 and counts["adapters"] == 0
    assert counts["total"] == counts["vision"] + counts["projector"]


def test_count_matches_enumeration_oracle():
    base = build_model(ModelConfig(), seed=0)
    model = build_genieblue(base, plan_placement(8, Fraction(1, 4), "skip"), rank=8)
    counts = count_trainable(model)
    # walk every parameter the slow way and bucket by name prefix
    walked = {"blocks": 0, "adapters": 0, "vision": 0, "projector": 0}
    for name, p in model.named_parameters().items():
        n = int(np.prod(p.shape))
        if name.startswith("replicated."):
            walked["blocks"] += n
        elif name.startswith("adapter."):
            walked["adapters"] += n
        elif name.startswith("vision."):
            walked["vision"] += n
        elif name.startswith("projector."):
            walked["projector"] += n
    for key, val in walked.items():
        assert counts[key] == val
    assert counts["total"] == sum(walked.values())


def test_cogvlm_experts_exclude_norm_gains():
    base = build_model(ModelConfig(), seed=0)
    sched = plan_placement(8, Fraction(1, 4), "skip")
    gb = count_trainable(build_genieblue(base, sched, rank=8))["total"]
    cv = count_trainable(build_cogvlm(base, sched, rank=8))["total"]
    assert gb - cv == 2 * 2 * base.config.d_model  # two norm gains per replicated block


# ----------------------------------------------------------------------------
# LoRA merging
# ----------------------------------------------------------------------------


def test_merge_zero_up_factor_is_bit_exact():
    w = np.random.default_rng(0).normal(size=(6, 4))
    adapter = LoraAdapter(down=Tensor(np.ones((2, 4))), up=Tensor(np.zeros((6, 2))))
    assert merge_lora(w, adapter).tobytes() == w.tobytes()


def test_merge_one_by_one_case():
    adapter = LoraAdapter(down=Tensor([[4.0]]), up=Tensor([[3.0]]), scale=1.0)
    assert merge_lora(np.array([[2.0]]), adapter)[0, 0] == 14.0


def test_merge_shape_mismatch_rejected():
    adapter = LoraAdapter(down=Tensor(np.zeros((2, 5))), up=Tensor(np.zeros((6, 2))))
    with pytest.raises(ShapeMismatch):
        merge_lora(np.zeros((6, 4)), adapter)


def test_merged_forward_equals_adapter_forward(rng):
    cfg = ModelConfig(
        vocab_size=32, d_model=16, n_layers=4, n_heads=2, max_seq=12,
        grid_side=3, grid_alphabet=4, d_vision=8, n_vision_heads=2,
    )
    base = build_model(cfg, seed=0)
    hybrid = build_genieblue(base, plan_placement(4, Fraction(1, 4), "skip"), rank=8, seed=1)
    for per_block in hybrid.adapters.values():
        for a in per_block.values():
            a.up.data += rng.normal(scale=0.1, size=a.up.shape)
    batch = _text_batch(rng, cfg, bsz=3, t=12)
    via_adapters = decode(cfg, hybrid.lm.params, hybrid.bindings(), batch).data
    via_merged = decode(cfg, hybrid.lm.params, merged_bindings(hybrid), batch).data
    err = np.abs(via_adapters - via_merged)
    denom = np.maximum(np.abs(via_adapters), 1e-30)
    assert (err / denom).max() < 1e-9


# ----------------------------------------------------------------------------
# freeze masks
# ----------------------------------------------------------------------------


def test_stage1_trains_projector_only(tiny_base):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    hybrid = build_genieblue(tiny_base, sched, rank=4)
    mask = freeze_mask(hybrid, 1)
    assert set(mask) == {n for n in hybrid.named_parameters() if n.startswith("projector.")}
    total = sum(p.size for p in mask.values())
    assert total == count_trainable(hybrid)["projector"]


def test_stage2_excludes_base_everywhere(tiny_base):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    hybrid = build_genieblue(tiny_base, sched, rank=4)
    mask = freeze_mask(hybrid, 2)
    assert not any(n.startswith("lm.") for n in mask)
    assert any(n.startswith("replicated.") for n in mask)
    assert any(n.startswith("adapter.") for n in mask)
    assert any(n.startswith("vision.") for n in mask)
    assert any(n.startswith("projector.") for n in mask)


def test_stage2_trainable_count_matches_count_trainable(tiny_base):
    sched = plan_placement(tiny_base.config.n_layers, Fraction(1, 4), "skip")
    hybrid = build_genieblue(tiny_base, sched, rank=4)
    mask = freeze_mask(hybrid, 2)
    assert sum(p.size for p in mask.values()) == count_trainable(hybrid)["total"]


def test_unknown_stage_rejected(tiny_base):
    with pytest.raises(ValueError, match="stage"):
        freeze_mask(tiny_base, 3)


def test_full_finetune_stage2_trains_everything(tiny_base):
    mask = freeze_mask(tiny_base, 2)
    assert set(mask) == set(tiny_base.named_parameters())
