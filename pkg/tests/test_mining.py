"""Tests for in-batch hard-negative mining, including a brute-force oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textvisual.diffcore import squared_distance
from textvisual.errors import ConfigError, MiningError
from textvisual.mining import (
    MODE_ALL,
    MODE_ANY,
    MODE_UNFILTERED,
    BatchSample,
    lexical_filter,
    mine_negatives,
    pairwise_sq_dist,
)


def sample(i, vec, words, image_id=None):
    return BatchSample(
        index=i,
        image_id=image_id or f"img{i}",
        image_vec=np.asarray(vec, dtype=np.float64),
        content_words=frozenset(words),
    )


# ---------------------------------------------------------------------------
# independent brute-force oracle (explicit sets, full sort, same rules)


def oracle_mine(batch, n, mode):
    """Reference miner: explicit set logic, full sort with (distance, index)
    keys, same relaxation chain.

    Distances come from an independent row-wise numpy expression that is
    bitwise-equal to per-pair squared_distance (that equality has its own
    dedicated test below).
    """
    out = []
    b = len(batch)
    vecs = np.stack([s.image_vec for s in batch])
    for i in range(b):
        pos = batch[i]
        row = np.sum((vecs - vecs[i]) ** 2, axis=1)
        dists = {j: float(row[j]) for j in range(b)}
        candidates = [
            j for j in range(b) if j != i and batch[j].image_id != pos.image_id
        ]
        chain = [mode]
        if mode == MODE_ANY:
            chain.append(MODE_ALL)
        if not pos.content_words:
            chain = [MODE_ANY]

        picked, used = [], None
        for try_mode in chain:
            if try_mode == MODE_ANY:
                survivors = [
                    j for j in candidates if not (pos.content_words & batch[j].content_words)
                ]
            else:
                survivors = [
                    j for j in candidates if not (pos.content_words <= batch[j].content_words)
                ]
            if survivors:
                survivors.sort(key=lambda j: (dists[j], j))
                picked = [(j, dists[j]) for j in survivors[:n]]
                used = try_mode
                break
        if not picked:
            if not candidates:
                raise MiningError(f"no candidate for {i}")
            candidates.sort(key=lambda j: (dists[j], j))
            picked = [(candidates[0], dists[candidates[0]])]
            used = MODE_UNFILTERED
        out.append((i, picked, used))
    return out


def assert_matches_oracle(batch, n, mode):
    mined = mine_negatives(batch, n, mode)
    expected = oracle_mine(batch, n, mode)
    for entry, (i, picked, used) in zip(mined.entries, expected):
        assert entry.positive_index == i
        assert entry.filter_mode_used == used
        assert list(entry.negatives) == picked


# ---------------------------------------------------------------------------
# pairwise distances


def test_pairwise_identical_vectors_all_zero():
    batch = [sample(i, [1.0, 2.0], {"x"}) for i in range(3)]
    np.testing.assert_array_equal(pairwise_sq_dist(batch), np.zeros((3, 3)))


def test_pairwise_two_points():
    batch = [sample(0, [0.0, 0.0], {"x"}), sample(1, [3.0, 4.0], {"y"})]
    m = pairwise_sq_dist(batch)
    assert m[0, 1] == 25.0 and m[1, 0] == 25.0
    assert m[0, 0] == 0.0 and m[1, 1] == 0.0


def test_pairwise_matches_per_pair_oracle_large():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(512, 16))
    batch = [sample(i, vecs[i], {"w"}) for i in range(512)]
    m = pairwise_sq_dist(batch)
    for i in range(0, 512, 37):
        for j in range(0, 512, 41):
            assert m[i, j] == squared_distance(vecs[i], vecs[j])
    np.testing.assert_array_equal(m, m.T)


def test_pairwise_dimension_mismatch():
    batch = [sample(0, [1.0], {"x"}), sample(1, [1.0, 2.0], {"y"})]
    with pytest.raises(ConfigError):
        pairwise_sq_dist(batch)


# ---------------------------------------------------------------------------
# lexical filter


def test_filter_any_overlap_removes_shared_word():
    pos = sample(0, [0.0], {"man", "motorbike"})
    cand = sample(1, [0.0], {"man", "walking"})
    assert lexical_filter(pos, cand, MODE_ANY) is False


def test_filter_all_overlap_keeps_partial_overlap():
    pos = sample(0, [0.0], {"man", "motorbike"})
    both = sample(1, [0.0], {"man", "motorbike", "road"})
    only_one = sample(2, [0.0], {"man", "walking"})
    assert lexical_filter(pos, both, MODE_ALL) is False
    assert lexical_filter(pos, only_one, MODE_ALL) is True


def test_filter_disjoint_kept_in_both_modes():
    pos = sample(0, [0.0], {"man", "motorbike"})
    cand = sample(1, [0.0], {"dog", "park"})
    assert lexical_filter(pos, cand, MODE_ANY) is True
    assert lexical_filter(pos, cand, MODE_ALL) is True


def test_filter_empty_positive_keeps_everything():
    pos = sample(0, [0.0], set())
    cand = sample(1, [0.0], {"anything"})
    assert lexical_filter(pos, cand, MODE_ANY) is True
    assert lexical_filter(pos, cand, MODE_ALL) is True


# ---------------------------------------------------------------------------
# mine_negatives


def test_mine_hand_example():
    batch = [
        sample(0, [0.0], {"man", "motorbike"}),
        sample(1, [1.0], {"man"}),
        sample(2, [2.0], {"dog"}),
        sample(3, [3.0], {"cat"}),
    ]
    mined = mine_negatives(batch, 2, "any")
    entry = mined.entries[0]
    assert entry.filter_mode_used == MODE_ANY
    assert list(entry.negatives) == [(2, 4.0), (3, 9.0)]


def test_mine_fallback_chain():
    # every sample shares "dog": any-overlap removes all, all-overlap keeps
    # candidates that do not contain every positive word
    batch = [
        sample(0, [0.0], {"dog", "ball"}),
        sample(1, [1.0], {"dog"}),
        sample(2, [2.0], {"dog", "ball", "park"}),
        sample(3, [3.0], {"dog", "frisbee"}),
    ]
    mined = mine_negatives(batch, 3, "any")
    entry = mined.entries[0]
    assert entry.filter_mode_used == MODE_ALL
    assert [j for j, _ in entry.negatives] == [1, 3]  # 2 is a superset


def test_mine_unfiltered_fallback():
    # positive 0 has one word shared with everyone and every candidate is a
    # superset of it: both filters reject, nearest sample wins unfiltered
    batch = [
        sample(0, [0.0], {"dog"}),
        sample(1, [5.0], {"dog", "a"}),
        sample(2, [2.0], {"dog", "b"}),
    ]
    mined = mine_negatives(batch, 2, "any")
    entry = mined.entries[0]
    assert entry.filter_mode_used == MODE_UNFILTERED
    assert list(entry.negatives) == [(2, 4.0)]


def test_mine_excludes_same_image_id():
    batch = [
        sample(0, [0.0], {"a"}, image_id="dup"),
        sample(1, [0.5], {"b"}, image_id="dup"),
        sample(2, [9.0], {"c"}),
    ]
    mined = mine_negatives(batch, 2, "any")
    assert [j for j, _ in mined.entries[0].negatives] == [2]


def test_mine_all_same_image_id_raises():
    batch = [sample(0, [0.0], {"a"}, "x"), sample(1, [1.0], {"b"}, "x")]
    with pytest.raises(MiningError):
        mine_negatives(batch, 1, "any")


def test_mine_tie_breaks_by_lower_index():
    batch = [
        sample(0, [0.0, 0.0], {"a"}),
        sample(1, [1.0, 0.0], {"b"}),
        sample(2, [0.0, 1.0], {"c"}),  # same distance as 1
        sample(3, [2.0, 0.0], {"d"}),
    ]
    mined = mine_negatives(batch, 3, "any")
    assert [j for j, _ in mined.entries[0].negatives] == [1, 2, 3]


def test_mine_empty_content_words_uses_any_mode():
    batch = [
        sample(0, [0.0], set()),
        sample(1, [1.0], {"x"}),
        sample(2, [4.0], {"y"}),
    ]
    for mode in ("any", "all"):
        mined = mine_negatives(batch, 2, mode)
        entry = mined.entries[0]
        assert entry.filter_mode_used == MODE_ANY
        assert [j for j, _ in entry.negatives] == [1, 2]


def test_mine_needs_two_samples():
    with pytest.raises(ConfigError):
        mine_negatives([sample(0, [0.0], {"a"})], 1, "any")


def random_batch(rng, b=48, dim=8, vocab=20, stop=4, words=3, quantize=True):
    vocab_words = [f"v{i}" for i in range(vocab)]
    stop_words = set(vocab_words[:stop])
    if quantize:
        vecs = rng.integers(0, 4, (b, dim)).astype(np.float64) / 2.0
    else:
        vecs = rng.normal(size=(b, dim))
    batch = []
    for i in range(b):
        text = rng.choice(vocab_words, size=words)
        content = frozenset(text) - stop_words
        batch.append(sample(i, vecs[i], content))
    return batch


@pytest.mark.parametrize("mode", ["any", "all"])
@pytest.mark.parametrize("n", [1, 3])
def test_mine_matches_oracle_random(mode, n):
    rng = np.random.default_rng(42)
    for _ in range(10):
        assert_matches_oracle(random_batch(rng), n, MODE_ANY if mode == "any" else MODE_ALL)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.sampled_from([MODE_ANY, MODE_ALL]),
    st.integers(1, 4),
)
def test_mine_oracle_property(seed, mode, n):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 24))
    vocab = int(rng.integers(2, 8))  # tiny vocab to force fallbacks
    batch = random_batch(rng, b=b, dim=4, vocab=vocab, stop=1, words=2)
    assert_matches_oracle(batch, n, mode)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mine_invariants(seed):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, b=int(rng.integers(4, 32)))
    n = int(rng.integers(1, 5))
    mined = mine_negatives(batch, n, MODE_ANY)
    again = mine_negatives(batch, n, MODE_ANY)
    assert mined.entries == again.entries  # pure function
    for entry in mined.entries:
        pos = batch[entry.positive_index]
        dists = [d for _, d in entry.negatives]
        assert all(d >= 0 for d in dists)
        assert dists == sorted(dists)
        assert len(entry.negatives) <= n
        for j, _ in entry.negatives:
            assert j != entry.positive_index
            assert batch[j].image_id != pos.image_id
            if entry.filter_mode_used == MODE_ANY:
                assert not (pos.content_words & batch[j].content_words)


def test_mine_permutation_consistency():
    rng = np.random.default_rng(7)
    batch = random_batch(rng, b=16, quantize=False)  # distinct distances
    mined = mine_negatives(batch, 2, MODE_ANY)
    perm = rng.permutation(16)
    inverse = np.argsort(perm)
    permuted = [
        BatchSample(i, batch[j].image_id, batch[j].image_vec, batch[j].content_words)
        for i, j in enumerate(perm)
    ]
    mined_p = mine_negatives(permuted, 2, MODE_ANY)
    for old_i, entry in enumerate(mined.entries):
        new_entry = mined_p.entries[inverse[old_i]]
        old_ids = [batch[j].image_id for j, _ in entry.negatives]
        new_ids = [permuted[j].image_id for j, _ in new_entry.negatives]
        assert old_ids == new_ids
