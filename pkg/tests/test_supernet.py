import math

import numpy as np
import pytest

from lowrank_nas import layers as L
from lowrank_nas.data import DatasetSpec, generate, iter_batches, make_splits
from lowrank_nas.linalg import frobenius_norm, svd, tail_error, truncate
from lowrank_nas.supernet import (LowRankFactorPair, RankChoiceSet, RankConfig, SamplerDistribution, Supernet,
                                  build_supernet, default_choice_sets, order_rng, train_supernet)
from lowrank_nas.vit import LowRankLinear, ModelConfig, build_model, fit


@pytest.fixture(scope="module")
def data():
    ds = generate(DatasetSpec(samples_per_class=40))
    return ds, make_splits(ds, seed=0)


@pytest.fixture(scope="module")
def base(data):
    ds, sp = data
    model = build_model(ModelConfig())
    fit(model, ds, sp["train"], 3, 0.05)
    return model


# ---------------------------------------------------------------- choice sets


def test_grid_is_strictly_below_breakeven():
    assert RankChoiceSet.grid(32, 32, 4).ranks == (4, 8, 12)
    assert RankChoiceSet.grid(32, 64, 4).ranks == (4, 8, 12, 16, 20)
    assert RankChoiceSet.grid(8, 8, 1).ranks == (1, 2, 3)


@pytest.mark.parametrize("ranks", [(), (8, 4), (4, 4), (0, 4), (4, 40)])
def test_invalid_choice_sets(ranks):
    with pytest.raises(ValueError):
        RankChoiceSet(ranks, 32, 32)


def test_overcomplete_needs_opt_in():
    with pytest.raises(ValueError):
        RankChoiceSet((4, 16), 32, 32)
    cs = RankChoiceSet((4, 8, 16, 32), 32, 32, 4, allow_overcomplete=True)
    assert cs.overcomplete == (16, 32)
    with pytest.raises(ValueError):
        RankChoiceSet((4, 6), 32, 32, granularity=4)


def test_search_space_size_counting(base):
    cs = {s.slot_id: RankChoiceSet((4, 8, 16, 32), s.m, s.n, 4, True) for s in base.cfg.slots()}
    s = build_supernet(base, cs)
    assert s.space_size == 4 ** 12 == 16_777_216


def test_rank_config_roundtrip():
    c = RankConfig.from_mapping({"a": 4, "b": 8}, ["b", "a"])
    assert c.ranks == (8, 4) and str(c) == "8,4"
    assert RankConfig.from_ranks(["b", "a"], [8, 4]) == c
    with pytest.raises(ValueError):
        RankConfig.from_ranks(["a"], [1, 2])


# ---------------------------------------------------------------- sampling


def test_lowrank_pmf_direct_evaluation():
    d = SamplerDistribution.lowrank_aware({"s": RankChoiceSet((1, 2, 4), 16, 16)})
    pmf = d.pmf("s")
    assert pmf[1] == pytest.approx(4 / 7, abs=1e-15)
    assert pmf[2] == pytest.approx(2 / 7, abs=1e-15)
    assert pmf[4] == pytest.approx(1 / 7, abs=1e-15)


def test_singleton_pmf_is_certain():
    d = SamplerDistribution.lowrank_aware({"s": RankChoiceSet((8,), 32, 32)})
    assert d.pmf("s") == {8: 1.0}
    rng = np.random.default_rng(0)
    assert all(d.sample(rng).ranks == (8,) for _ in range(50))


def test_joint_probability_is_product():
    cs = {"a": RankChoiceSet((1, 2, 4), 16, 16), "b": RankChoiceSet((1, 3), 16, 16)}
    d = SamplerDistribution.lowrank_aware(cs)
    c = RankConfig.from_ranks(["a", "b"], [2, 3])
    assert d.probability(c) == pytest.approx((2 / 7) * (1 / 3) / (1 + 1 / 3))
    u = SamplerDistribution.uniform(cs)
    assert u.probability(c) == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        SamplerDistribution.named("zipf", cs)


# ---------------------------------------------------------------- construction


def test_singleton_full_rank_supernet_is_lossless(base, data):
    ds, sp = data
    cs = {s.slot_id: RankChoiceSet((min(s.m, s.n),), s.m, s.n, 1, True) for s in base.cfg.slots()}
    s = build_supernet(base, cs)
    images = ds.images[:64]
    dense = base.forward(images)
    low = s.activate(s.max_config()).forward(images)
    assert np.linalg.norm(low - dense) <= 1e-6 * np.linalg.norm(dense)
    assert np.allclose(s.activate(s.full_config(), strict=False).forward(images), dense, rtol=0, atol=1e-9)


def test_build_does_not_modify_input(base):
    before = {k: v.copy() for k, v in base.parameters().items()}
    build_supernet(base, default_choice_sets(base))
    after = base.parameters()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_initialization_error_equals_tail_sigma(base):
    s = build_supernet(base, default_choice_sets(base))
    for sid, block in s.blocks.items():
        W = base.slots[sid].W
        res = svd(W)
        for r in block.choice_set:
            U, V = block.view(r)
            assert frobenius_norm(W - U @ V.T) == pytest.approx(tail_error(res, r), rel=1e-8)


def test_only_choice_blocks_are_trainable(base):
    s = build_supernet(base, default_choice_sets(base, blocks=[1]))
    assert len(s.blocks) == 6
    assert s.model.trainable == {f"{sid}.{k}" for sid in s.slot_ids for k in "UVb"}
    assert all(sid.startswith("blocks.1.") for sid in s.slot_ids)


def test_check_rejects_out_of_set_ranks(base):
    s = build_supernet(base, default_choice_sets(base), width="full")
    with pytest.raises(ValueError):
        s.activate(s.uniform_config(16))
    s.activate(s.uniform_config(16), strict=False)
    with pytest.raises(ValueError):
        s.activate(s.uniform_config(40), strict=False)
    with pytest.raises(ValueError):
        s.activate(RankConfig.from_ranks(s.slot_ids[:3], [4, 4, 4]))


# ---------------------------------------------------------------- weight inheritance


def test_views_alias_storage(base):
    s = build_supernet(base, default_choice_sets(base))
    block = s.blocks["blocks.0.fc1"]
    u4, v4 = block.view(4)
    u12, v12 = block.view(12)
    assert np.shares_memory(u4, block.U) and np.shares_memory(v12, block.V)
    u12[0, 1] = 123.0
    assert u4[0, 1] == 123.0
    v4[2, 3] = -7.0
    assert v12[2, 3] == -7.0
    view = s.activate(s.max_config())
    assert np.shares_memory(view.factors("blocks.0.fc1")[0], block.U)


def test_prefix_gradient_equals_zero_padded_gradient(base, data):
    ds, _ = data
    s = build_supernet(base, default_choice_sets(base))
    sid, r = "blocks.1.fc2", 8
    images, labels = ds.images[:16], ds.labels[:16]
    ranks = {k: 12 for k in s.slot_ids}
    ranks[sid] = r

    logits = s.model.forward(images, ranks=ranks, keep=True)
    g_prefix = s.model.backward(L.cross_entropy(logits, labels)[1])

    padded = s.model.copy()
    blk = padded.slots[sid]
    blk.U[:, r:] = 0.0
    blk.V[:, r:] = 0.0
    wide = dict(ranks, **{sid: blk.width})
    logits2 = padded.forward(images, ranks=wide, keep=True)
    g_wide = padded.backward(L.cross_entropy(logits2, labels)[1])

    assert g_prefix[f"{sid}.U"].shape[1] == r
    assert np.allclose(g_prefix[f"{sid}.U"], g_wide[f"{sid}.U"][:, :r], rtol=1e-10, atol=1e-13)
    assert np.allclose(g_prefix[f"{sid}.V"], g_wide[f"{sid}.V"][:, :r], rtol=1e-10, atol=1e-13)
    assert np.all(g_wide[f"{sid}.U"][:, r:] == 0)


def test_columns_beyond_sampled_rank_are_untouched(base, data):
    ds, sp = data
    s = build_supernet(base, default_choice_sets(base))
    dist = SamplerDistribution.lowrank_aware(s.choice_sets)
    snapshot = {sid: (b.U.copy(), b.V.copy()) for sid, b in s.blocks.items()}
    trace = train_supernet(s, ds, sp["train"], 1, dist, base, seed=3)
    assert len(trace) == math.ceil(len(sp["train"]) / 32)
    touched = {sid: max(rec.config.as_dict()[sid] for rec in trace) for sid in s.slot_ids}
    for sid, b in s.blocks.items():
        U0, V0 = snapshot[sid]
        r = touched[sid]
        assert np.array_equal(b.U[:, r:], U0[:, r:])
        assert np.array_equal(b.V[:, r:], V0[:, r:])
        assert not np.array_equal(b.U[:, :r], U0[:, :r])


def test_frozen_tensors_stay_frozen(base, data):
    ds, sp = data
    s = build_supernet(base, default_choice_sets(base, blocks=[0]))
    frozen = {k: v.copy() for k, v in s.model.parameters().items() if k not in s.model.trainable}
    train_supernet(s, ds, sp["train"], 1, SamplerDistribution.uniform(s.choice_sets), base, seed=1)
    now = s.model.parameters()
    assert all(np.array_equal(frozen[k], now[k]) for k in frozen)
    assert s.trained


def test_training_is_deterministic(base, data):
    ds, sp = data
    out = []
    for _ in range(2):
        s = build_supernet(base, default_choice_sets(base))
        trace = train_supernet(s, ds, sp["train"], 1, SamplerDistribution.lowrank_aware(s.choice_sets), base,
                               seed=7)
        out.append(([rec.to_line() for rec in trace], s.weights_checksum()))
    assert out[0] == out[1]


def hand_finetune(base, ranks, ds, split, epochs, lr, batch_size, seed):
    """Reference: distilled momentum-SGD finetuning of a plain truncated low-rank model."""
    model = base.copy()
    for sid, r in ranks.items():
        U, V = truncate(svd(base.slots[sid].W), r)
        model.slots[sid] = LowRankLinear(U, V, base.slots[sid].b.copy())
    model.trainable = {f"{sid}.{k}" for sid in ranks for k in "UVb"}
    total = epochs * math.ceil(len(split) / batch_size)
    momentum = {}
    losses = []
    t = 0
    rng = order_rng(seed)
    for _ in range(epochs):
        for images, labels in iter_batches(ds, split, batch_size, rng):
            logits = model.forward(images, keep=True)
            loss, dlogits = L.distill_loss(logits, labels, base.forward(images))
            grads = model.backward(dlogits)
            step_lr = 0.5 * lr * (1.0 + math.cos(math.pi * (min(t, total) / total)))
            params = model.parameters()
            for name in sorted(grads):
                buf = momentum.setdefault(name, np.zeros_like(params[name]))
                buf[...] = 0.9 * buf + grads[name]
                params[name] -= step_lr * buf
            losses.append(loss)
            t += 1
    return losses


def test_singleton_supernet_matches_hand_built_finetuner(base, data):
    ds, sp = data
    ranks = {s.slot_id: (8 if s.role in ("fc1", "fc2") else 4) for s in base.cfg.slots()}
    cs = {sid: RankChoiceSet((r,), *next((s.m, s.n) for s in base.cfg.slots() if s.slot_id == sid))
          for sid, r in ranks.items()}
    s = build_supernet(base, cs)
    trace = train_supernet(s, ds, sp["train"], 2, SamplerDistribution.lowrank_aware(cs), base,
                           lr=0.02, batch_size=16, seed=4)
    ref = hand_finetune(base, ranks, ds, sp["train"], 2, 0.02, 16, 4)
    assert [rec.loss for rec in trace] == ref


def test_factor_pair_width_check():
    cs = RankChoiceSet((4, 6), 16, 16)
    with pytest.raises(ValueError):
        LowRankFactorPair("x", np.zeros((16, 4)), np.zeros((16, 4)), np.zeros(16), cs)


def test_supernet_needs_choice_blocks(base):
    with pytest.raises(ValueError):
        Supernet(base.copy())
