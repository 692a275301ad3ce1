"""Generator determinism and structure checks for the synthetic corpus."""

import numpy as np

from textvisual import synthetic
from textvisual.dataio import load_features, load_pairs, load_word_vectors


def test_corpus_is_deterministic():
    a = synthetic.make_corpus(seed=42, train_per_source=50, test_per_source=10)
    b = synthetic.make_corpus(seed=42, train_per_source=50, test_per_source=10)
    assert a.train_caption.samples == b.train_caption.samples
    assert a.test_click.samples == b.test_click.samples
    np.testing.assert_array_equal(a.table.matrix, b.table.matrix)
    for k in a.train_store.records:
        np.testing.assert_array_equal(a.train_store.records[k], b.train_store.records[k])


def test_sources_use_disjoint_content_vocabularies():
    corpus = synthetic.make_corpus(seed=1, train_per_source=40, test_per_source=10)
    cap_words = {w for t, _ in corpus.train_caption.samples for w in t.split()}
    clk_words = {w for t, _ in corpus.train_click.samples for w in t.split()}
    stop = set(synthetic.STOP_WORDS)
    assert (cap_words - stop) & (clk_words - stop) == set()


def test_text_shapes():
    corpus = synthetic.make_corpus(seed=2, train_per_source=30, test_per_source=10)
    assert all(len(t.split()) == 5 for t, _ in corpus.train_caption.samples)
    assert all(len(t.split()) == 2 for t, _ in corpus.train_click.samples)


def test_test_sets_have_unique_content_word_sets():
    corpus = synthetic.make_corpus(seed=3, train_per_source=30, test_per_source=60)
    stop = set(synthetic.STOP_WORDS)
    for ds in (corpus.test_caption, corpus.test_click):
        seen = [frozenset(t.split()) - stop for t, _ in ds.samples]
        assert len(set(seen)) == len(seen)


def test_every_pair_resolvable_and_labelled():
    corpus = synthetic.make_corpus(seed=4, train_per_source=30, test_per_source=10)
    for ds, store in (
        (corpus.train_caption, corpus.train_store),
        (corpus.train_click, corpus.train_store),
        (corpus.test_caption, corpus.test_caption_store),
        (corpus.test_click, corpus.test_click_store),
    ):
        for _, image_id in ds.samples:
            assert image_id in store
            assert image_id in corpus.labels


def test_write_corpus_round_trips(tmp_path):
    corpus = synthetic.make_corpus(seed=5, train_per_source=20, test_per_source=8)
    paths = synthetic.write_corpus(corpus, tmp_path)
    table = load_word_vectors(paths["wordvecs"])
    assert table.vocab == corpus.table.vocab
    np.testing.assert_array_equal(table.matrix, corpus.table.matrix)
    store = load_features(paths["train_features"])
    assert list(store.records) == list(corpus.train_store.records)
    pairs = load_pairs(paths["test_click"], "click")
    assert pairs.samples == corpus.test_click.samples
