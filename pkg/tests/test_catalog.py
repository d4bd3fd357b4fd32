import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from billp.catalog import (
    CatalogError,
    DatasetManifest,
    InteractionRecord,
    ItemCatalog,
    ItemRecord,
    TrainingError,
    build_catalog,
    chronological_split,
    distance_percentile,
    filter_min_interactions,
    item_distance,
    load_log,
    load_snapshot,
    prepare,
    save_snapshot,
    train_scorer,
    transform_steam_ratings,
    user_sequences,
    write_split_index,
)
from conftest import rec, write_csv


# -- ingestion ---------------------------------------------------------------


def test_load_wellformed_csv(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["user_id", "item_id", "rating", "timestamp"], [["u1", "i1", 4, 10], ["u1", "i2", 5, 11], ["u2", "i1", 3, 12]])
    log = load_log(p)
    assert len(log.records) == 3 and log.n_malformed == 0
    assert log.records[0] == InteractionRecord("u1", "i1", 4.0, 10, 2)


def test_malformed_row_is_counted_and_skipped(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["user_id", "item_id", "rating", "timestamp"], [["u1", "i1", "abc", 10], ["u1", "i2", 5, 11], ["u2", "i3", 9, 12]])
    log = load_log(p)
    assert [r.item_id for r in log.records] == ["i2"]
    assert [line for line, _ in log.malformed] == [2, 4]


def test_missing_file_and_column(tmp_path):
    with pytest.raises(CatalogError):
        load_log(tmp_path / "nope.csv")
    p = write_csv(tmp_path / "a.csv", ["user_id", "item_id", "timestamp"], [["u", "i", 1]])
    with pytest.raises(CatalogError, match="rating"):
        load_log(p)
    with pytest.raises(CatalogError):
        load_log(p, schema="netflix")


def test_steam_schema_converts_playtime(tmp_path):
    p = write_csv(
        tmp_path / "s.csv",
        ["user_id", "item_id", "playtime", "timestamp", "title", "categories"],
        [["u", "g1", 10.0, 1, "Long Game", "RPG|Action"], ["u", "g2", 3.0, 2, "", ""], ["u", "g3", 0, 3, "Zero", "Puzzle"], ["u", "g4", -1, 4, "", ""]],
    )
    log = load_log(p, "steam")
    assert [r.rating for r in log.records] == [5.0, 2.0, 2.0]
    assert log.n_malformed == 1
    assert log.items["g1"].title == "Long Game" and log.items["g1"].categories == ("RPG", "Action")
    assert log.items["g2"].title == "g2" and log.items["g2"].categories == ("unknown",)


@pytest.mark.parametrize("hours,rating", [(10.0, 5.0), (3.0, 2.0), (3.0001, 5.0), (0.0, 2.0)])
def test_transform_steam_ratings(hours, rating):
    r = InteractionRecord("u", "i", None, 1, 7, playtime=hours)
    (out,) = transform_steam_ratings([r])
    assert out.rating == rating and out.playtime == hours and out.row == 7


def test_transform_rejects_negative_playtime():
    with pytest.raises(CatalogError):
        transform_steam_ratings([InteractionRecord("u", "i", None, 1, playtime=-0.5)])


# -- filtering ---------------------------------------------------------------


def kcore_oracle(records, mu, mi):
    """Brute force: largest subset closed under the thresholds, found by repeated full recount."""
    keep = set(range(len(records)))
    changed = True
    while changed:
        changed = False
        uc = Counter(records[k].user_id for k in keep)
        ic = Counter(records[k].item_id for k in keep)
        for k in sorted(keep):
            if uc[records[k].user_id] < mu or ic[records[k].item_id] < mi:
                keep.discard(k)
                changed = True
                break
    return [records[k] for k in sorted(keep)]


def test_filter_identity_when_all_pass():
    rs = [rec(u, i, 3, 1) for u in "ab" for i in "xy"]
    assert filter_min_interactions(rs, 2, 2) == rs


def test_filter_removes_sparse_user():
    rs = [rec("a", i, 3, 1) for i in "vwxyz"] + [rec("b", "v", 3, 2)]
    assert all(r.user_id == "a" for r in filter_min_interactions(rs, 5, 1))


def test_filter_chain_case():
    # b and d have one record each and go; y is then left with two users,
    # below min_item=3, so the cascade empties the log.
    rs = [rec("a", "y", 3, 1), rec("b", "y", 3, 2), rec("c", "y", 3, 3), rec("c", "z", 3, 4), rec("d", "z", 3, 5), rec("a", "q", 3, 6)]
    got = filter_min_interactions(rs, 2, 3)
    assert got == kcore_oracle(rs, 2, 3) == []


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=0, max_size=40),
    st.integers(1, 4),
    st.integers(1, 4),
)
def test_filter_matches_oracle_and_is_idempotent(pairs, mu, mi):
    rs = [rec(f"u{u}", f"i{i}", 3, n + 1) for n, (u, i) in enumerate(pairs)]
    once = filter_min_interactions(rs, mu, mi)
    assert once == kcore_oracle(rs, mu, mi)
    assert filter_min_interactions(once, mu, mi) == once


# -- split -------------------------------------------------------------------


def test_split_even_and_odd():
    s = chronological_split([rec("u", f"i{t}", 3, t) for t in (1, 2, 3, 4)])
    assert [r.timestamp for r in s.train] == [1, 2] and [r.timestamp for r in s.test] == [3, 4]
    s = chronological_split([rec("u", f"i{t}", 3, t) for t in range(1, 6)])
    assert (len(s.train), len(s.test)) == (3, 2)


def test_split_ties_keep_input_order():
    rs = [rec("u", "b", 3, 5), rec("u", "a", 3, 5), rec("u", "c", 3, 1), rec("u", "d", 3, 9)]
    s = chronological_split(rs)
    assert [r.item_id for r in s.train] == ["b", "c"]


def test_split_independent_of_interleaving():
    base = [rec("u", "a", 3, 1), rec("u", "b", 3, 2), rec("v", "c", 3, 3), rec("v", "d", 3, 4)]
    splits = set()
    for perm in itertools.permutations(base):
        s = chronological_split(list(perm))
        splits.add((frozenset(r.item_id for r in s.train), frozenset(r.item_id for r in s.test)))
    assert splits == {(frozenset("ac"), frozenset("bd"))}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 6)), max_size=40))
def test_split_conserves_records(pairs):
    rs = [rec(f"u{u}", f"i{n}", 3, t, n) for n, (u, t) in enumerate(pairs)]
    s = chronological_split(rs)
    assert Counter(s.train + s.test) == Counter(rs)
    n_users = len({r.user_id for r in rs})
    assert 0 <= len(s.train) - len(s.test) <= n_users
    for u in {r.user_id for r in rs}:
        tr = [r.timestamp for r in s.train if r.user_id == u]
        te = [r.timestamp for r in s.test if r.user_id == u]
        assert not tr or not te or max(tr) <= min(te)


def test_user_sequences_chronological():
    rs = [rec("u", "b", 3, 2), rec("u", "a", 3, 1), rec("v", "x", 3, 1)]
    assert user_sequences(rs) == {"u": ["a", "b"], "v": ["x"]}


# -- scorer ------------------------------------------------------------------


def rank1_log(n_users=40, n_items=40, holdout=0.2, seed=0):
    rng = np.random.default_rng(seed)
    eu = rng.uniform(1.0, 2.2, n_users)
    ei = rng.uniform(1.0, 2.2, n_items)
    recs = [rec(f"u{u}", f"i{i}", float(np.clip(eu[u] * ei[i], 1, 5)), 1) for u in range(n_users) for i in range(n_items)]
    mask = rng.random(len(recs)) < holdout
    train = [r for r, m in zip(recs, mask) if not m]
    test = [r for r, m in zip(recs, mask) if m]
    return train, test


def heldout_rmse(model, test):
    return float(np.sqrt(np.mean([(model.score(r.user_id, r.item_id) - r.rating) ** 2 for r in test])))


def test_rank1_recovery():
    train, test = rank1_log()
    model = train_scorer(train, dim=1, epochs=200, lr=0.02, seed=0)
    assert heldout_rmse(model, test) < 0.2


def test_rmse_history_monotone_and_seeded():
    train, _ = rank1_log(20, 20, seed=3)
    a = train_scorer(train, dim=4, epochs=30, lr=0.5, seed=7)  # large lr to exercise rollbacks
    assert all(y <= x + 1e-6 for x, y in zip(a.rmse_history, a.rmse_history[1:]))
    b = train_scorer(train, dim=4, epochs=30, lr=0.5, seed=7)
    probe = [(r.user_id, r.item_id) for r in train[:50]]
    assert [a.score(*p) for p in probe] == [b.score(*p) for p in probe]


def test_constant_target():
    rs = [rec(f"u{u}", f"i{i}", 5.0, 1) for u in range(6) for i in range(6)]
    m = train_scorer(rs, dim=2, epochs=20, seed=0)
    assert all(abs(m.score(r.user_id, r.item_id) - 5) < 0.1 for r in rs)


def test_disjoint_groups_ranked_correctly():
    rs = [rec(f"a{u}", f"x{i}", 5.0, 1) for u in range(5) for i in range(5)]
    rs += [rec(f"b{u}", f"y{i}", 5.0, 1) for u in range(5) for i in range(5)]
    rs += [rec(f"a{u}", f"y{i}", 2.0, 1) for u in range(5) for i in range(0, 5, 2)]
    rs += [rec(f"b{u}", f"x{i}", 2.0, 1) for u in range(5) for i in range(1, 5, 2)]
    m = train_scorer(rs, dim=4, epochs=150, lr=0.05, seed=1)
    for u in range(5):
        same = [m.score(f"a{u}", f"x{i}") for i in range(5)]
        cross = [m.score(f"a{u}", f"y{i}") for i in range(5)]
        assert max(cross) < min(same)
        assert min(same) >= 4.0


def test_scorer_errors():
    with pytest.raises(TrainingError):
        train_scorer([])
    with pytest.raises(TrainingError):
        train_scorer([InteractionRecord("u", "i", None, 1, playtime=4.0)])
    m = train_scorer([rec("u", "i", 4, 1)], dim=1, epochs=2)
    with pytest.raises(CatalogError):
        m.score("u", "nope")
    with pytest.raises(CatalogError):
        m.score("nobody", "i")
    assert 1.0 <= m.score("u", "i") <= 5.0
    assert m.score("u", "i") == m.score("u", "i")


def test_divergence_names_epoch():
    rs = [rec(f"u{u}", f"i{i}", 5.0 if (u + i) % 2 else 1.0, 1) for u in range(5) for i in range(5)]
    with pytest.raises(TrainingError, match="epoch 1"):
        train_scorer(rs, dim=2, epochs=3, lr=1e200, init_std=1.0)


# -- catalog / distance / persistence -----------------------------------------


def vec_catalog(vectors):
    return ItemCatalog(ItemRecord(k, k.upper()) for k in vectors).with_embeddings({k: np.array(v, float) for k, v in vectors.items()})


def test_item_distance_examples():
    c = vec_catalog({"i": (0, 0), "j": (3, 4), "k": (0, 0)})
    assert item_distance(c, "i", "j") == 5.0
    assert item_distance(c, "i", "k") == 0.0
    with pytest.raises(CatalogError):
        item_distance(c, "i", "zzz")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=3, max_size=3))
def test_distance_axioms(vs):
    c = vec_catalog({"a": vs[0], "b": vs[1], "c": vs[2]})
    dab, dba = item_distance(c, "a", "b"), item_distance(c, "b", "a")
    assert dab >= 0 and dab == dba
    assert dab == pytest.approx(float(np.sqrt(sum((x - y) ** 2 for x, y in zip(vs[0], vs[1])))), rel=1e-12, abs=1e-12)
    assert item_distance(c, "a", "c") <= dab + item_distance(c, "b", "c") + 1e-9 * (1 + dab)


def test_distance_percentile():
    c = vec_catalog({"a": (0,), "b": (1,), "c": (3,)})
    assert distance_percentile(c, 0) == 1.0
    assert distance_percentile(c, 100) == 3.0
    assert distance_percentile(c, 50) == 2.0


def test_catalog_basics():
    c = build_catalog({"b": ItemRecord("b", "Bee")}, [rec("u", "b", 3, 1), rec("u", "a", 3, 1)])
    assert c.ids == ["a", "b"] and c["a"].title == "a" and "b" in c and len(c) == 2
    assert not c.has_embeddings
    with pytest.raises(CatalogError):
        c.embedding("a")
    with pytest.raises(CatalogError):
        ItemCatalog([ItemRecord("a", "A"), ItemRecord("a", "B")])
    restricted = c.with_embeddings({"b": np.ones(2)})
    assert restricted.ids == ["b"]


def test_snapshot_roundtrip_bit_exact(tmp_path):
    train, _ = rank1_log(10, 10)
    model = train_scorer(train, dim=3, epochs=5, seed=2)
    cat = build_catalog({"i1": ItemRecord("i1", "One", ("A", "B"))}, train)
    save_snapshot(tmp_path / "s.npz", cat, model)
    cat2, model2 = load_snapshot(tmp_path / "s.npz")
    assert cat2.ids == cat.ids and cat2["i1"].categories == ("A", "B")
    for a, b in [(model.user_factors, model2.user_factors), (model.item_factors, model2.item_factors), (model.item_bias, model2.item_bias)]:
        assert a.tobytes() == b.tobytes()
    assert model2.rmse_history == model.rmse_history and model2.global_bias == model.global_bias
    with pytest.raises(CatalogError):
        load_snapshot(tmp_path / "missing.npz")


def test_manifest_and_prepare(tmp_path):
    rows = []
    for u in range(4):
        for i in range(6):
            rows.append([f"u{u}", f"g{i}", 5 if (u + i) % 2 else 1, 100 + 10 * i + u])
    write_csv(tmp_path / "log.csv", ["user_id", "item_id", "playtime", "timestamp"], rows)
    (tmp_path / "m.toml").write_text('[dataset]\npath = "log.csv"\nschema = "steam"\nmin_user = 3\nmin_item = 2\n')
    m = DatasetManifest.from_file(tmp_path / "m.toml")
    prep = prepare(m)
    assert len(prep.filtered) == 24 and len(prep.split.train) == 12
    assert {r.rating for r in prep.filtered} == {2.0, 5.0}
    write_split_index(tmp_path / "split.json", prep.split)
    idx = json.loads((tmp_path / "split.json").read_text())
    assert sorted(idx["train"] + idx["test"]) == list(range(2, 26))
    (tmp_path / "bad.toml").write_text("[other]\n")
    with pytest.raises(CatalogError):
        DatasetManifest.from_file(tmp_path / "bad.toml")
