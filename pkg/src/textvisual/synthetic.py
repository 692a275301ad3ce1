"""Synthetic clustered corpus for end-to-end checks and demos.

Ten cluster centers live in a small feature space. Every content word owns
a fixed displacement; an image embedding is its cluster center plus the sum
of its text's word displacements plus small noise. Word vectors share the
feature dimensionality and carry their cluster center and displacement, so
summing a text's content-word vectors lands near its image: the target map
is learnable, but the encoder still has to aggregate the sequence and damp
stop words. Caption-style texts use five tokens (four content words and one
stop word), click-style texts use two content words from a disjoint
vocabulary, which makes single-source models fail on the other source's
test set.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FeatureStore, PairDataset, write_features, write_word_vectors
from .textenc import WordVectorTable

N_CLUSTERS = 10
FEATURE_DIM = 32
WORD_DIM = FEATURE_DIM
CAPTION_WORDS_PER_CLUSTER = 12
CLICK_WORDS_PER_CLUSTER = 16
CAPTION_CONTENT_LEN = 4
CLICK_CONTENT_LEN = 2
STOP_WORDS = ("a", "the", "of", "on", "in", "with")


@dataclass
class SyntheticCorpus:
    table: WordVectorTable
    train_caption: PairDataset
    train_click: PairDataset
    test_caption: PairDataset
    test_click: PairDataset
    train_store: FeatureStore
    test_caption_store: FeatureStore
    test_click_store: FeatureStore
    labels: dict[str, str]  # image_id -> cluster label


def _cluster_vocab() -> tuple[list[list[str]], list[list[str]]]:
    caption = [
        [f"cap{c}w{j}" for j in range(CAPTION_WORDS_PER_CLUSTER)] for c in range(N_CLUSTERS)
    ]
    click = [
        [f"clk{c}w{j}" for j in range(CLICK_WORDS_PER_CLUSTER)] for c in range(N_CLUSTERS)
    ]
    return caption, click


def make_corpus(
    seed: int = 42,
    train_per_source: int = 2000,
    test_per_source: int = 500,
    noise: float = 0.01,
    word_shift: float = 0.15,
    center_scale: float = 0.35,
) -> SyntheticCorpus:
    """Deterministically generate the full train/test corpus for one seed."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, (N_CLUSTERS, FEATURE_DIM))
    caption_vocab, click_vocab = _cluster_vocab()

    shift: dict[str, np.ndarray] = {}
    words: list[str] = []
    rows: list[np.ndarray] = []
    for c in range(N_CLUSTERS):
        for group, content_len in ((caption_vocab[c], CAPTION_CONTENT_LEN), (click_vocab[c], CLICK_CONTENT_LEN)):
            for w in group:
                shift[w] = rng.normal(0.0, word_shift, FEATURE_DIM)
                words.append(w)
                rows.append(centers[c] / content_len + shift[w])
    for w in STOP_WORDS:
        words.append(w)
        rows.append(rng.normal(0.0, 0.02, FEATURE_DIM))
    table = WordVectorTable(
        dim=WORD_DIM,
        vocab={w: i for i, w in enumerate(words)},
        matrix=np.stack(rows).astype(np.float32),
    )

    labels: dict[str, str] = {}

    def image_for(cluster: int, content: tuple[str, ...]) -> np.ndarray:
        vec = centers[cluster] + sum(shift[w] for w in content)
        vec = vec + rng.normal(0.0, noise, FEATURE_DIM)
        return vec.astype(np.float32)

    def gen_caption(cluster: int) -> tuple[str, tuple[str, ...]]:
        content = tuple(rng.choice(caption_vocab[cluster], size=CAPTION_CONTENT_LEN, replace=False))
        stop = STOP_WORDS[int(rng.integers(len(STOP_WORDS)))]
        pos = int(rng.integers(CAPTION_CONTENT_LEN + 1))
        tokens = list(content)
        tokens.insert(pos, stop)
        return " ".join(tokens), content

    def gen_click(cluster: int) -> tuple[str, tuple[str, ...]]:
        content = tuple(rng.choice(click_vocab[cluster], size=CLICK_CONTENT_LEN, replace=False))
        return " ".join(content), content

    def build_split(source: str, split: str, count: int, store: FeatureStore, unique: bool):
        gen = gen_caption if source == "caption" else gen_click
        seen: set[frozenset] = set()
        samples = []
        for i in range(count):
            cluster = i % N_CLUSTERS
            text, content = gen(cluster)
            while unique and frozenset(content) in seen:
                text, content = gen(cluster)
            seen.add(frozenset(content))
            image_id = f"{source[:3]}-{split}-{i:05d}"
            store.add(image_id, image_for(cluster, content))
            labels[image_id] = f"cluster{cluster}"
            samples.append((text, image_id))
        return PairDataset(source=source, samples=samples)

    train_store = FeatureStore(dim=FEATURE_DIM)
    test_cap_store = FeatureStore(dim=FEATURE_DIM)
    test_clk_store = FeatureStore(dim=FEATURE_DIM)
    train_caption = build_split("caption", "train", train_per_source, train_store, False)
    train_click = build_split("click", "train", train_per_source, train_store, False)
    test_caption = build_split("caption", "test", test_per_source, test_cap_store, True)
    test_click = build_split("click", "test", test_per_source, test_clk_store, True)

    return SyntheticCorpus(
        table=table,
        train_caption=train_caption,
        train_click=train_click,
        test_caption=test_caption,
        test_click=test_click,
        train_store=train_store,
        test_caption_store=test_cap_store,
        test_click_store=test_clk_store,
        labels=labels,
    )


def benchmark_encoder_config():
    """Encoder settings for the clustered-benchmark runs."""
    from .textenc import EncoderConfig

    return EncoderConfig(
        word_dim=WORD_DIM,
        hidden_size=64,
        num_layers=1,
        dropout_rate=0.0,
        max_seq_len=8,
        output_dim=FEATURE_DIM,
    )


def benchmark_train_config(variant: str = "patr", epochs: int = 30, seed: int = 42):
    """Training settings for the clustered-benchmark runs: batch 128,
    margin 1.2 with 3 mined negatives, flat 1e-3 learning rate."""
    from .losses import LossConfig
    from .trainer import TrainConfig

    n_negatives = 3 if variant == "patr" else 1
    return TrainConfig(
        encoder=benchmark_encoder_config(),
        loss=LossConfig(variant=variant, eta=1.2, rho=0.5, n_negatives=n_negatives),
        batch_size=128,
        epochs=epochs,
        lr_schedule=((0, 1e-3),),
        mining_mode="any",
        seed=seed,
    )


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict[str, Path]:
    """Dump the corpus in the package's on-disk formats; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "wordvecs": out / "words.vec",
        "train_features": out / "train_features.bin",
        "test_caption_features": out / "test_caption_features.bin",
        "test_click_features": out / "test_click_features.bin",
        "train_caption": out / "train_caption_pairs.tsv",
        "train_click": out / "train_click_pairs.tsv",
        "test_caption": out / "test_caption_pairs.tsv",
        "test_click": out / "test_click_pairs.tsv",
        "labels": out / "labels.tsv",
    }
    write_word_vectors(corpus.table, paths["wordvecs"])
    write_features(corpus.train_store, paths["train_features"])
    write_features(corpus.test_caption_store, paths["test_caption_features"])
    write_features(corpus.test_click_store, paths["test_click_features"])
    for key, ds in (
        ("train_caption", corpus.train_caption),
        ("train_click", corpus.train_click),
        ("test_caption", corpus.test_caption),
        ("test_click", corpus.test_click),
    ):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for text, image_id in ds.samples:
                fh.write(f"{image_id}\t{text}\n")
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        for image_id, label in corpus.labels.items():
            fh.write(f"{image_id}\t{label}\n")
    return paths
