from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrshare.kvcache import (SCHEME_NAMES, CacheScheme, KvStore, OverwriteError, PlanError, cache_bytes,
                             default_recompute_layers, key_ratio, plan_step, value_path_ratio)

DATA = Path(__file__).parent / "data"
D_KV, RANK, D_MODEL, N_LAYERS = 4, 2, 8, 2


def row(pos, width, salt):
    """Deterministic row content for a token position (shared rows must agree)."""
    return np.array([[pos * 100.0 + salt * 10.0 + c for c in range(width)]])


def rows(start, stop, width, salt):
    return np.concatenate([row(p, width, salt) for p in range(start, stop)]) if stop > start \
        else np.zeros((0, width))


def new(variant, layers=frozenset({1}), hidden=True):
    scheme = CacheScheme(variant, layers if variant == "SelectiveRecompute" else frozenset(), hidden)
    return scheme, KvStore(scheme, N_LAYERS, 3, D_KV, RANK, D_MODEL)


def follow(store, scheme, agent, n):
    """Write exactly what the plan asks for, with position-determined contents."""
    plan = plan_step(store, scheme, agent, n)
    v = scheme.variant
    for li in range(N_LAYERS):
        k0, k1 = plan.kv_range(li)
        l0, l1 = plan.lr_range(li)
        key = rows(k0, k1, D_KV, 1)
        if v in ("BaseShared", "BaseLRShared"):
            store.append(li, agent, k0, key=key, value_base=rows(k0, k1, D_KV, 2))
            store.append(li, agent, l0, lr=rows(l0, l1, RANK, 3 + agent * (v == "BaseShared")))
        elif li in plan.recompute_layers:
            store.recompute(li, k0, key, rows(k0, k1, D_KV, 5 + agent))
        else:
            store.append(li, agent, k0, key=key, value=rows(k0, k1, D_KV, 2 + agent * (v == "NonShared")))
    if store.hidden is not None:
        store.append_hidden(plan.length_before, rows(*plan.new_range, D_MODEL, 9))
    store.commit(agent, np.arange(n))
    return plan


@pytest.mark.parametrize("variant", SCHEME_NAMES)
def test_cold_start_plans_new_tokens_only(variant):
    scheme, store = new(variant)
    plan = plan_step(store, scheme, 0, 7)
    assert plan.hidden_pass_range == plan.kv_project_range == plan.lr_project_range == (0, 7)
    for li in range(N_LAYERS):
        assert plan.rows_at(li) == (0, 7)


def test_agent_switch_plans():
    scheme, store = new("BaseLRShared")
    follow(store, scheme, 0, 1000)
    plan = plan_step(store, scheme, 1, 10)
    assert plan.hidden_pass_range == (1000, 1010)
    assert plan.kv_project_range == plan.lr_project_range == (1000, 1010)

    scheme, store = new("BaseShared")
    follow(store, scheme, 0, 1000)
    plan = plan_step(store, scheme, 1, 10)
    assert plan.hidden_pass_range == (0, 1010)
    assert plan.kv_project_range == (1000, 1010)
    assert plan.lr_project_range == (0, 1010)

    scheme, store = new("NonShared")
    follow(store, scheme, 0, 1000)
    plan = plan_step(store, scheme, 1, 10)
    assert plan.hidden_pass_range == plan.kv_project_range == plan.lr_project_range == (0, 1010)

    scheme, store = new("FullShared")
    follow(store, scheme, 0, 1000)
    assert plan_step(store, scheme, 1, 10).hidden_pass_range == (1000, 1010)


def test_selective_recompute_plan():
    scheme, store = new("SelectiveRecompute", frozenset({1}))
    follow(store, scheme, 0, 30)
    follow(store, scheme, 1, 5)
    plan = plan_step(store, scheme, 0, 4)
    assert plan.hidden_pass_range == (30, 39)
    assert plan.kv_range(0) == (35, 39)
    assert plan.kv_range(1) == (30, 39)
    # the hidden cache lets old rows skip layer 0
    assert plan.rows_at(0) == (35, 39)
    assert plan.rows_at(1) == (30, 39)
    assert plan.to_dict()["hidden_skip_layers"] == 1
    no_cache = CacheScheme("SelectiveRecompute", frozenset({1}), hidden_cache=False)
    s2 = KvStore(no_cache, N_LAYERS, 3, D_KV, RANK, D_MODEL)
    follow(s2, no_cache, 0, 30)
    follow(s2, no_cache, 1, 5)
    assert plan_step(s2, no_cache, 0, 4).rows_at(0) == (30, 39)


def test_base_shared_second_agent_writes_only_lr():
    scheme, store = new("BaseShared")
    follow(store, scheme, 0, 12)
    base_before = store.values(0, 0).copy()
    follow(store, scheme, 1, 0)
    assert np.array_equal(store.values(0, 1), base_before)
    assert store.lr_rows(0, 1).shape == (12, RANK)
    assert sorted(store.layers[0].agent_lr) == [0, 1]
    assert not np.array_equal(store.lr_rows(0, 0), store.lr_rows(0, 1))


def test_first_writer_wins():
    scheme, store = new("BaseShared")
    follow(store, scheme, 0, 5)
    store.append(0, 1, 2, key=rows(2, 5, D_KV, 1))  # identical re-send is a no-op
    with pytest.raises(OverwriteError):
        store.append(0, 1, 2, value_base=rows(2, 5, D_KV, 7))
    with pytest.raises(PlanError):
        store.append(0, 1, 9, key=rows(9, 10, D_KV, 1))
    with pytest.raises(PlanError):
        store.append(0, 0, 5, value=rows(5, 6, D_KV, 1))


def test_full_shared_second_agent_appends_nothing():
    scheme, store = new("FullShared")
    follow(store, scheme, 0, 6)
    before = cache_bytes(store)
    plan = follow(store, scheme, 1, 0)
    assert plan.hidden_pass_range == (6, 6)
    assert cache_bytes(store) == before


def test_non_shared_caches_are_disjoint():
    scheme, store = new("NonShared")
    follow(store, scheme, 0, 6)
    follow(store, scheme, 1, 2)
    assert store.keys(0, 0).shape[0] == 6
    assert store.keys(0, 1).shape[0] == 8
    assert store.values(0, 2).shape[0] == 0
    assert not np.array_equal(store.values(0, 0), store.values(0, 1)[:6])


def test_commit_checks_row_counts():
    scheme, store = new("FullShared")
    with pytest.raises(PlanError):
        store.commit(0, np.arange(3))
    with pytest.raises(KeyError):
        plan_step(store, scheme, 5, 1)
    with pytest.raises(PlanError):
        plan_step(store, CacheScheme("NonShared"), 0, 1)


@given(st.sampled_from(SCHEME_NAMES),
       st.lists(st.tuples(st.integers(0, 2), st.integers(0, 6)), min_size=1, max_size=8))
def test_plan_invariants_property(variant, steps):
    scheme, store = new(variant)
    seen_hist = {}
    for agent, n in steps:
        L = store.length
        plan = follow(store, scheme, agent, n)
        for rng_ in (plan.hidden_pass_range, plan.kv_project_range, plan.lr_project_range):
            assert 0 <= rng_[0] <= rng_[1] == L + n
        if variant == "BaseShared":
            assert plan.lr_project_range[0] <= plan.kv_project_range[0]
        assert store.length == L + n
        for a, s in store.seen_upto.items():
            assert s <= store.length
            assert s >= seen_hist.get(a, 0)
        seen_hist = dict(store.seen_upto)
        b = cache_bytes(store)
        elems = sum(buf.n * buf.cols for lc in store.layers for _, _, buf in lc.buffers())
        elems += store.hidden.n * store.hidden.cols if store.hidden is not None else 0
        assert b.total == elems * 8
    if variant == "BaseLRShared":
        assert all(lc.lr is not None and not lc.agent_lr for lc in store.layers)
    if variant == "BaseShared":
        assert all(len(lc.agent_lr) <= 3 for lc in store.layers)


def test_closed_form_ratios():
    assert value_path_ratio("BaseShared", 3, 8, 1024) == Fraction(1, 3) + Fraction(8, 1024)
    assert float(value_path_ratio("BaseShared", 3, 8, 1024) - Fraction(1, 3)) == 0.0078125
    assert float(value_path_ratio("BaseLRShared", 3, 8, 1024) - Fraction(1, 3)) == 8 / 3072
    assert value_path_ratio("FullShared", 3, 8, 1024) == Fraction(1, 3)
    assert key_ratio("BaseLRShared", 3) == Fraction(1, 3)
    assert key_ratio("NonShared", 3) == 1


def test_store_bytes_match_closed_forms():
    for variant in ("BaseShared", "BaseLRShared", "FullShared"):
        ref_scheme, ref = new("NonShared")
        scheme, store = new(variant)
        for s, st_ in ((ref_scheme, ref), (scheme, store)):
            follow(st_, s, 0, 10)
            follow(st_, s, 1, 3)
            follow(st_, s, 2, 2)
            follow(st_, s, 0, 0)
            follow(st_, s, 1, 0)
        got, base = cache_bytes(store), cache_bytes(ref)
        assert Fraction(got.value_path, base.value_path) == value_path_ratio(variant, 3, RANK, D_KV)
        assert Fraction(got.key, base.key) == Fraction(1, 3)


def test_gqa_hidden_cache_is_twice_one_layer_kv():
    # group size 4: d_model = 4 * d_kv
    scheme = CacheScheme("SelectiveRecompute", frozenset({1}))
    store = KvStore(scheme, N_LAYERS, 3, D_KV, RANK, 4 * D_KV)
    plan = plan_step(store, scheme, 0, 9)
    for li in range(N_LAYERS):
        k0, k1 = plan.kv_range(li)
        store.append(li, 0, k0, key=rows(k0, k1, D_KV, 1), value=rows(k0, k1, D_KV, 2))
    store.append_hidden(0, rows(0, 9, 4 * D_KV, 3))
    store.commit(0, np.arange(9))
    b = cache_bytes(store)
    assert b.hidden == 2 * (b.key + b.value) // N_LAYERS


def test_scheme_parsing_and_defaults():
    assert CacheScheme.parse("DroidSpeak:0,2").recompute_layers == {0, 2}
    assert CacheScheme.parse("non-shared").variant == "NonShared"
    d = default_recompute_layers(32, seed=0)
    assert len(d) == 11 and d == default_recompute_layers(32, seed=0)
    assert CacheScheme.parse("SelectiveRecompute", 32).recompute_layers == d
    assert CacheScheme.parse("SelectiveRecompute:0,3").name == "SelectiveRecompute:0,3"
    with pytest.raises(ValueError):
        CacheScheme.parse("Bogus")
    with pytest.raises(ValueError):
        CacheScheme.parse("FullShared:1")
    with pytest.raises(ValueError):
        KvStore(CacheScheme("SelectiveRecompute", {5}), 2, 3, D_KV, RANK, D_MODEL)
    with pytest.raises(ValueError):
        CacheScheme("BaseShared", {0})


def golden_store():
    scheme, store = new("BaseShared")
    follow(store, scheme, 0, 3)
    follow(store, scheme, 1, 2)
    return store


def test_snapshot_round_trip(tmp_path):
    for variant in SCHEME_NAMES:
        scheme, store = new(variant)
        follow(store, scheme, 0, 4)
        follow(store, scheme, 2, 3)
        path = tmp_path / f"{variant}.bin"
        store.save(path)
        back = KvStore.load(path)
        assert back.scheme == store.scheme
        assert back.seen_upto == store.seen_upto
        assert cache_bytes(back) == cache_bytes(store)
        for li in range(N_LAYERS):
            for a in range(3):
                assert np.array_equal(back.keys(li, a), store.keys(li, a))
                assert np.array_equal(back.values(li, a), store.values(li, a))
                assert np.array_equal(back.lr_rows(li, a), store.lr_rows(li, a))


def test_snapshot_matches_golden_file(tmp_path):
    path = tmp_path / "snap.bin"
    golden_store().save(path)
    assert path.read_bytes() == (DATA / "golden_snapshot.bin").read_bytes()
    loaded = KvStore.load(DATA / "golden_snapshot.bin")
    assert loaded.seen_upto == {0: 3, 1: 5}
    assert np.array_equal(loaded.lr_rows(1, 1), rows(0, 5, RANK, 4))
