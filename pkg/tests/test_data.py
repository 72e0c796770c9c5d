import numpy as np
import pytest

from mmrec import data as D
from mmrec.data import (DataError, Dataset, ItemRecord, SyntheticConfig,
                        cold_item_subsequences, filter_and_split,
                        generate_synthetic, load_dataset, make_batches,
                        planted_transition_matrix, save_dataset,
                        stats_report, train_item_counts)


def toy_dataset(users, n_items=None):
    if n_items is None:
        n_items = max(i for s in users for i in s) + 1
    items = {i: ItemRecord(i, [i + 1], np.full((2, 3), float(i)))
             for i in range(n_items)}
    return Dataset(items=items, users=[list(s) for s in users])


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    items = {i: ItemRecord(i, rng.integers(1, 9, size=3).tolist(),
                           rng.normal(size=(2, 3))) for i in range(4)}
    ds = Dataset(items=items, users=[[0, 1, 2], [3, 2, 1, 0]])
    ip, xp = tmp_path / "items.tsv", tmp_path / "inter.tsv"
    save_dataset(ds, ip, xp)
    back = load_dataset(ip, xp)
    assert back.users == ds.users
    assert back.q == 2 and back.patch_dim == 3
    for i in items:
        assert back.items[i].tokens == items[i].tokens
        np.testing.assert_array_equal(back.items[i].patches, items[i].patches)


def test_save_is_byte_deterministic(tmp_path):
    src, _ = generate_synthetic(SyntheticConfig(n_users=5, n_items=8, seed=3))
    paths = []
    for tag in ("a", "b"):
        ip, xp = tmp_path / f"i{tag}.tsv", tmp_path / f"x{tag}.tsv"
        save_dataset(src, ip, xp)
        paths.append((ip.read_bytes(), xp.read_bytes()))
    assert paths[0] == paths[1]


def write(path, text):
    path.write_text(text)
    return str(path)


def test_load_rejects_malformed_with_line_numbers(tmp_path):
    inter = write(tmp_path / "x.tsv", "0\t0 1\n")
    good_head = "#meta q=1 patch_dim=2\n"
    cases = [
        (good_head + "0\t1 2\t0.0 0.0\nbadline\n", "3"),
        (good_head + "0\t1 2\t0.0\n", "patch values"),
        (good_head + "0\t1 2\t0.0 0.0\n0\t3\t0.0 0.0\n", "duplicate"),
        (good_head + "0\t\t0.0 0.0\n", "no tokens"),
        ("0\t1 2\t0.0 0.0\n", "#meta"),
        (good_head + "0\tx y\t0.0 0.0\n", "2"),
    ]
    for text, needle in cases:
        ip = write(tmp_path / "i.tsv", text)
        with pytest.raises(DataError, match=needle):
            load_dataset(ip, inter)


def test_load_rejects_dangling_interaction_index(tmp_path):
    ip = write(tmp_path / "i.tsv", "#meta q=1 patch_dim=1\n0\t1\t0.5\n")
    xp = write(tmp_path / "x.tsv", "0\t0 7\n")
    with pytest.raises(DataError, match="x.tsv:1.*unknown catalog index 7"):
        load_dataset(ip, xp)


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------

def brute_force_filter(users, k):
    """Reference fixed point: repeat single passes until nothing changes."""
    users = [list(s) for s in users]
    while True:
        counts = {}
        for s in users:
            for i in s:
                counts[i] = counts.get(i, 0) + 1
        nxt = []
        for s in users:
            s = [i for i in s if counts[i] >= k]
            if len(s) >= k:
                nxt.append(s)
        if nxt == users:
            return users
        users = nxt


@pytest.mark.parametrize("seed", range(5))
def test_filter_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    users = [rng.integers(0, 12, size=rng.integers(3, 12)).tolist()
             for _ in range(20)]
    ds = toy_dataset(users, n_items=12)
    split = filter_and_split(ds, min_interactions=5)
    expected = [s for s in brute_force_filter(users, 5) if len(s) >= 3]
    got = [t + [v, w] for t, v, w in zip(split.train, split.valid, split.test)]
    assert got == expected
    kept = {i for s in expected for i in s}
    assert set(split.items) == kept


def test_filter_idempotent():
    rng = np.random.default_rng(9)
    users = [rng.integers(0, 10, size=8).tolist() for _ in range(15)]
    s1 = filter_and_split(toy_dataset(users, n_items=10))
    again = [t + [v, w] for t, v, w in zip(s1.train, s1.valid, s1.test)]
    s2 = filter_and_split(toy_dataset(again, n_items=10))
    assert s2.train == s1.train and s2.valid == s1.valid and s2.test == s1.test


def test_filter_cascade_removes_item_then_user():
    # item 9 appears 4 times (< 5): dropping it shortens user 4 below 5,
    # whose removal starves nothing else
    users = [[0, 1, 2, 3, 9], [0, 1, 2, 3, 9], [0, 1, 2, 3, 9],
             [0, 1, 2, 3, 0], [9, 1, 2, 3, 0]]
    split = filter_and_split(toy_dataset(users, n_items=10), min_interactions=5)
    assert 9 not in split.items
    for t, v, w in zip(split.train, split.valid, split.test):
        assert 9 not in t + [v, w]


def test_split_assigns_last_two_items():
    users = [[0, 1, 2, 3, 4]] * 5
    split = filter_and_split(toy_dataset(users), min_interactions=5)
    assert split.train[0] == [0, 1, 2]
    assert split.valid[0] == 3
    assert split.test[0] == 4


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def small_split():
    users = [[0, 1, 2, 3, 4]] * 3 + [[4, 3, 2, 1, 0]] * 2
    return filter_and_split(toy_dataset(users), min_interactions=5)


def test_batching_counts_and_padding():
    split = small_split()  # 5 users, train length 3 each
    batches = make_batches(split, B=2, L_max=4, seed=0)
    assert [b.size for b in batches] == [2, 2, 1]
    for b in batches:
        assert b.idx.shape == b.mask.shape
        assert np.all((b.idx == D.PAD_ITEM) == (b.mask == 0))


def test_batching_truncates_to_last_l_max():
    users = [[0, 1, 2, 3, 4, 0, 1, 2]] * 5
    split = filter_and_split(toy_dataset(users), min_interactions=5)
    assert split.train[0] == [0, 1, 2, 3, 4, 0]
    batches = make_batches(split, B=5, L_max=4, seed=0)
    np.testing.assert_array_equal(batches[0].idx[0], [2, 3, 4, 0])


def test_batching_seed_determinism():
    split = small_split()
    a = make_batches(split, B=2, L_max=4, seed=7)
    b = make_batches(split, B=2, L_max=4, seed=7)
    c = make_batches(split, B=2, L_max=4, seed=8)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.idx, y.idx)
        assert x.rng_seed == y.rng_seed
    assert any(not np.array_equal(x.idx, y.idx) or x.rng_seed != y.rng_seed
               for x, y in zip(a, c))


def test_batching_rejects_singleton_unless_allowed():
    split = small_split()
    with pytest.raises(DataError, match="batch size"):
        make_batches(split, B=1, L_max=4, seed=0)
    batches = make_batches(split, B=1, L_max=4, seed=0, allow_single=True)
    assert len(batches) == 5


def test_batches_cover_every_user_once():
    split = small_split()
    batches = make_batches(split, B=2, L_max=4, seed=3)
    rows = [tuple(b.idx[r][b.mask[r] > 0]) for b in batches for r in range(b.size)]
    assert sorted(rows) == sorted(tuple(s) for s in split.train)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_planted_matrix_is_cyclic():
    m = planted_transition_matrix(4)
    np.testing.assert_array_equal(m.sum(axis=1), 1.0)
    for s in range(4):
        assert m[s, (s + 1) % 4] == 1.0


def test_synthetic_disjoint_catalogs_and_structure():
    cfg = SyntheticConfig(n_users=20, n_items=12, seed=1)
    src, tgt = generate_synthetic(cfg)
    assert set(src.items).isdisjoint(tgt.items)
    assert len(src.items) == len(tgt.items) == 12
    for ds in (src, tgt):
        for seq in ds.users:
            assert all(i in ds.items for i in seq)
        for rec in ds.items.values():
            assert rec.patches.shape == (cfg.q, cfg.patch_dim)
            assert all(1 <= t < cfg.vocab_size for t in rec.tokens)
            assert cfg.p_min <= len(rec.tokens) <= cfg.p_max


def test_synthetic_noise_zero_respects_style_chain():
    cfg = SyntheticConfig(n_users=30, n_items=16, seed=2, transition_noise=0.0)
    src, tgt = generate_synthetic(cfg)
    for ds in (src, tgt):
        for seq in ds.users:
            for a, b in zip(seq, seq[1:]):
                assert ds.styles[b] == (ds.styles[a] + 1) % cfg.n_latent_styles


def test_synthetic_successor_type_is_deterministic_at_noise_zero():
    cfg = SyntheticConfig(n_users=50, n_items=16, seed=4, transition_noise=0.0)
    src, _ = generate_synthetic(cfg)
    succ_type = {}
    for seq in src.users:
        for a, b in zip(seq, seq[1:]):
            assert succ_type.setdefault(a, src.types[b]) == src.types[b]


def test_synthetic_types_shared_across_datasets():
    cfg = SyntheticConfig(n_users=20, n_items=16, seed=8)
    src, tgt = generate_synthetic(cfg)
    # local index -> type layout is identical; target is offset by n_items
    for local in range(16):
        assert src.types[local] == tgt.types[local + 16]
        assert src.styles[local] == src.types[local][0]


def test_synthetic_empirical_transition_matrix():
    cfg = SyntheticConfig(n_users=800, n_items=40, L_min=12, L_max=16,
                          seed=5, transition_noise=0.2)
    src, _ = generate_synthetic(cfg)
    S = cfg.n_latent_styles
    counts = np.zeros((S, S))
    for seq in src.users:
        for a, b in zip(seq, seq[1:]):
            counts[src.styles[a], src.styles[b]] += 1
    empirical = counts / counts.sum(axis=1, keepdims=True)
    # noisy steps land uniformly over styles (items split evenly)
    expected = 0.8 * planted_transition_matrix(S) + 0.2 / S
    assert np.abs(empirical - expected).max() < 0.02


def test_synthetic_bit_reproducible():
    cfg = SyntheticConfig(n_users=10, n_items=8, seed=6)
    a_src, a_tgt = generate_synthetic(cfg)
    b_src, b_tgt = generate_synthetic(SyntheticConfig(n_users=10, n_items=8, seed=6))
    for a, b in ((a_src, b_src), (a_tgt, b_tgt)):
        assert a.users == b.users
        for i in a.items:
            assert a.items[i].tokens == b.items[i].tokens
            np.testing.assert_array_equal(a.items[i].patches, b.items[i].patches)


def test_synthetic_rejects_bad_config():
    with pytest.raises(DataError, match="n_latent_styles"):
        SyntheticConfig(n_latent_styles=1)
    with pytest.raises(DataError, match="transition_noise"):
        SyntheticConfig(transition_noise=1.5)


# ---------------------------------------------------------------------------
# cold-start extraction
# ---------------------------------------------------------------------------

def test_cold_extraction_matches_brute_force():
    rng = np.random.default_rng(11)
    users = [rng.integers(0, 15, size=10).tolist() for _ in range(25)]
    split = filter_and_split(toy_dataset(users, n_items=15))
    threshold = 10
    counts = train_item_counts(split)
    expected = []
    for u in range(len(split.train)):
        full = list(split.train[u]) + [split.valid[u], split.test[u]]
        for pos in range(1, len(full)):
            if counts[full[pos]] < threshold:
                expected.append((full[:pos], full[pos]))
    got = cold_item_subsequences(split, threshold=threshold)
    assert got == expected
    assert expected  # fixture really exercises the cold branch
    for prefix, target in got:
        assert len(prefix) >= 1
        assert counts[target] < threshold


def test_cold_threshold_boundaries():
    users = [[0, 1, 2, 3, 4]] * 5  # every item occurs 5x overall, 3x in train
    split = filter_and_split(toy_dataset(users), min_interactions=5)
    assert cold_item_subsequences(split, threshold=0) == []
    # items 3 and 4 never occur in train (they are the valid/test targets),
    # so they are cold under any positive threshold
    pairs = cold_item_subsequences(split, threshold=1)
    assert sorted({t for _, t in pairs}) == [3, 4]
    assert len(pairs) == 5 * 2
    # items 0/1/2 occur 5x in train: cold once the threshold exceeds 5
    pairs = cold_item_subsequences(split, threshold=6)
    assert len(pairs) == 5 * 4  # every non-initial position of every user


def test_stats_report_columns():
    ds = toy_dataset([[0, 1, 2], [2, 1, 0, 1]])
    text = stats_report(ds, name="toy")
    assert "#users" in text and "toy" in text
    assert f"{2:>10}" in text.splitlines()[1]
