import itertools

import pytest

from lowrank_nas.cost import FlopsWindow, cost_of, satisfies
from lowrank_nas.data import DatasetSpec, generate, make_splits
from lowrank_nas.errors import InfeasibleWindowError
from lowrank_nas.filtering import integrate
from lowrank_nas.search import EAConfig, enumerate_best, evaluate_config, search
from lowrank_nas.supernet import RankChoiceSet, build_supernet, default_choice_sets
from lowrank_nas.vit import DenseLinear, ModelConfig, build_model, fit


@pytest.fixture(scope="module")
def data():
    ds = generate(DatasetSpec(samples_per_class=40))
    return ds, make_splits(ds, seed=0)


@pytest.fixture(scope="module")
def supernet(data):
    ds, sp = data
    model = build_model(ModelConfig())
    fit(model, ds, sp["train"], 4, 0.05)
    return build_supernet(model, default_choice_sets(model), width="full")


@pytest.fixture(scope="module")
def toy(supernet):
    """Two choice blocks with 10 ranks each (100 configurations)."""
    base = supernet.model.copy()
    for sid in supernet.slot_ids:
        blk = base.slots[sid]
        U, V = blk.factors()
        base.slots[sid] = DenseLinear(U @ V.T, blk.b.copy())
    cs = {sid: RankChoiceSet(tuple(range(2, 21, 2)), 32, 64, 2) if sid.endswith("fc1") else
          RankChoiceSet(tuple(range(2, 21, 2)), 64, 32, 2)
          for sid in ("blocks.0.fc1", "blocks.1.fc2")}
    return build_supernet(base, cs)


def dense_flops():
    return cost_of(ModelConfig()).flops


def test_candidates_inside_window_and_elitism(supernet, data):
    ds, sp = data
    window = FlopsWindow.fraction_of(dense_flops(), 0.4, 0.5)
    res = search(supernet, None, window, EAConfig(population=16, generations=6, seed=1), ds, sp["val"])
    assert res.candidates
    for c in res.candidates:
        assert satisfies(c.cost, window)
        assert c.cost == cost_of(supernet.model.cfg, c.config)
    best = [b for _, b, _ in res.history]
    assert len(best) == 7
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    fits = [c.fitness for c in res.candidates]
    assert fits == sorted(fits, reverse=True)
    assert res.best.fitness == best[-1]
    assert len({c.config for c in res.candidates}) == len(res.candidates)


def test_search_is_deterministic(supernet, data):
    ds, sp = data
    window = FlopsWindow.fraction_of(dense_flops(), 0.4, 0.5)
    ea = EAConfig(population=12, generations=4, seed=3)
    a = search(supernet, None, window, ea, ds, sp["val"])
    b = search(supernet, None, window, ea, ds, sp["val"])
    assert [c.to_line(i) for i, c in enumerate(a.candidates)] == [c.to_line(i) for i, c in enumerate(b.candidates)]
    assert a.history == b.history


def test_ea_matches_exhaustive_argmax_on_toy_space(toy, data):
    ds, sp = data
    window = FlopsWindow(1, 10 ** 9)
    res = search(toy, None, window, EAConfig(population=20, generations=15, seed=0), ds, sp["val"])
    oracle = None
    for vec in itertools.product(*(toy.blocks[sid].choice_set.ranks for sid in toy.slot_ids)):
        config = toy.config(vec)
        acc = toy.activate(config).evaluate(ds, sp["val"])
        key = (-acc, cost_of(toy.model.cfg, config).flops, vec)
        oracle = key if oracle is None or key < oracle else oracle
    assert res.best.config.ranks == oracle[2]
    assert res.best.fitness == -oracle[0]
    assert enumerate_best(toy, None, window, ds, sp["val"]).config == res.best.config


def test_windowed_toy_search_matches_oracle(toy, data):
    ds, sp = data
    flops = sorted(cost_of(toy.model.cfg, toy.config(v)).flops
                   for v in itertools.product(*(b.choice_set.ranks for b in toy.blocks.values())))
    window = FlopsWindow(flops[20], flops[60])
    res = search(toy, None, window, EAConfig(population=20, generations=15, seed=2), ds, sp["val"])
    assert res.best.config == enumerate_best(toy, None, window, ds, sp["val"]).config


def test_static_population_without_operators(supernet, data):
    ds, sp = data
    window = FlopsWindow.fraction_of(dense_flops(), 0.3, 0.6)
    res = search(supernet, None, window,
                 EAConfig(population=12, generations=5, mutation_prob=0.0, crossover_prob=0.0, seed=4),
                 ds, sp["val"])
    assert len({b for _, b, _ in res.history}) == 1


def test_singleton_space_returns_unique_config(supernet, data):
    ds, sp = data
    only = {sid: (8,) for sid in supernet.slot_ids}
    res = search(supernet, only, FlopsWindow(1, 10 ** 9), EAConfig(population=8, generations=2), ds, sp["val"])
    assert [c.config.ranks for c in res.candidates] == [(8,) * 12]


def test_retained_space_restricts_search(supernet, data):
    ds, sp = data
    sids0 = [s for s in supernet.slot_ids if s.startswith("blocks.0.")]
    sids1 = [s for s in supernet.slot_ids if s.startswith("blocks.1.")]
    space = integrate({0: (sids0, [(4,) * 6, (8,) * 6]), 1: (sids1, [(4,) * 6, (12, 4, 4, 4, 8, 8)])})
    res = search(supernet, space, FlopsWindow(1, 10 ** 9), EAConfig(population=8, generations=3), ds, sp["val"])
    allowed = space.slot_ranks()
    for c in res.candidates:
        assert all(r in allowed[sid] for sid, r in c.config.entries)


def test_infeasible_window(supernet, data):
    ds, sp = data
    with pytest.raises(InfeasibleWindowError):
        search(supernet, None, FlopsWindow(1, 10), EAConfig(population=8, probe_draws=500), ds, sp["val"])
    with pytest.raises(InfeasibleWindowError):
        enumerate_best(supernet, {sid: (4,) for sid in supernet.slot_ids}, FlopsWindow(1, 10), ds, sp["val"])


def test_evaluate_config_checks_space(supernet, data):
    ds, sp = data
    config = supernet.uniform_config(8)
    acc = evaluate_config(supernet, config, ds, sp["val"])
    assert acc == evaluate_config(supernet, config, ds, sp["val"])
    with pytest.raises(ValueError):
        evaluate_config(supernet, config, ds, sp["val"], space={sid: (4,) for sid in supernet.slot_ids})


@pytest.mark.parametrize("kw", [dict(population=3), dict(parent_fraction=0.0), dict(mutation_prob=1.5),
                                dict(population=4, parent_fraction=0.25)])
def test_ea_config_validation(kw):
    with pytest.raises(ValueError):
        EAConfig(**kw)


def test_generation_zero_history(supernet, data):
    ds, sp = data
    window = FlopsWindow.fraction_of(dense_flops(), 0.4, 0.5)
    res = search(supernet, None, window, EAConfig(population=8, generations=0, seed=5), ds, sp["val"])
    gen, best, mean = res.history[0]
    assert gen == 0 and best >= mean
    assert best == res.best.fitness
