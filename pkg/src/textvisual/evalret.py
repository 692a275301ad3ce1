"""Cross-modal retrieval by exact nearest-neighbor search, plus R@K and
mAP@R evaluation.

Both directions live in the shared image-feature space: text-to-image ranks
stored image embeddings against an encoded query; image-to-text ranks
encoded texts against an image embedding. Each supervision pair is one
query unit, so an image with several texts is queried once per text.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import Checkpoint, FeatureStore, PairDataset
from .errors import ConfigError
from .textenc import encode_batch, tokenize

DIRECTION_T2I = "txt2img"
DIRECTION_I2T = "img2txt"


def thread_limit() -> int:
    """Worker cap from PATR_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("PATR_THREADS", "0").strip()
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PATR_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"PATR_THREADS must be nonnegative, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


@dataclass
class RetrievalIndex:
    ids: list[str]
    matrix: np.ndarray  # (M, D)

    def __post_init__(self):
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise ConfigError(
                f"index has {len(self.ids)} ids but matrix shape {self.matrix.shape}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("retrieval index ids must be unique")
        if not np.isfinite(self.matrix).all():
            raise ConfigError("retrieval index contains non-finite embeddings")

    def __len__(self) -> int:
        return len(self.ids)


def _sq_dists(queries: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """(Q, M) squared distances, chunked over queries; threads cap from
    PATR_THREADS. Each element is the plain sum of squared differences."""
    q, dim = queries.shape
    m = matrix.shape[0]
    out = np.empty((q, m), dtype=np.result_type(queries.dtype, matrix.dtype))
    chunk = max(1, (1 << 23) // max(1, m * dim))
    spans = [(s, min(q, s + chunk)) for s in range(0, q, chunk)]

    def fill(span):
        lo, hi = span
        diff = queries[lo:hi, None, :] - matrix[None, :, :]
        out[lo:hi] = np.sum(diff * diff, axis=-1)

    workers = min(thread_limit(), len(spans))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, spans))
    else:
        for span in spans:
            fill(span)
    return out


def retrieve_topk(
    query_vec: np.ndarray, index: RetrievalIndex, k: int
) -> list[tuple[str, float]]:
    """k nearest index entries by squared distance, ascending; ties keep
    insertion order. k beyond the index size returns everything with a
    warning."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if query_vec.shape != (index.matrix.shape[1],):
        raise ConfigError(
            f"query shape {query_vec.shape} does not match index dim {index.matrix.shape[1]}"
        )
    if k > len(index):
        warnings.warn(f"k={k} exceeds index size {len(index)}; returning all entries")
        k = len(index)
    dists = _sq_dists(query_vec[None, :], index.matrix)[0]
    order = np.argsort(dists, kind="stable")[:k]
    return [(index.ids[j], float(dists[j])) for j in order]


def rank_all(queries: np.ndarray, index: RetrievalIndex) -> list[list[str]]:
    """Full ascending-distance id ranking for every query row."""
    if queries.shape[1] != index.matrix.shape[1]:
        raise ConfigError(
            f"query dim {queries.shape[1]} does not match index dim {index.matrix.shape[1]}"
        )
    dists = _sq_dists(queries, index.matrix)
    order = np.argsort(dists, axis=1, kind="stable")
    ids = index.ids
    return [[ids[j] for j in row] for row in order]


def recall_at_k(
    rankings: Mapping[str, Sequence[str]], ground_truth: Mapping[str, str], k: int
) -> float:
    """Fraction of queries whose ground-truth id appears in the top k."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not rankings:
        raise ConfigError("recall_at_k needs at least one query")
    hits = 0
    for query, ranking in rankings.items():
        if query not in ground_truth:
            raise ConfigError(f"query {query!r} has no ground-truth id")
        if ground_truth[query] in ranking[:k]:
            hits += 1
    return hits / len(rankings)


def average_precision(
    ranking: Sequence[str], labels: Mapping[str, str], query_label: str, r: int
) -> float:
    """Precision-weighted relevance over the top r results.

    Relevance means sharing the query's label; the normalizer is the number
    of relevant items retrieved within the top r (zero relevant -> 0).
    """
    if r < 1:
        raise ConfigError(f"R must be >= 1, got {r}")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranking[:r], start=1):
        label = labels.get(item)
        if label is None:
            raise ConfigError(f"id {item!r} has no label")
        if label == query_label:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


@dataclass
class EvalReport:
    dataset: str
    direction: str
    query_count: int
    recall: dict[int, float]
    map_r: Optional[int] = None
    map_value: Optional[float] = None
    config: dict = field(default_factory=dict)

    def cells(self) -> list[str]:
        row = [self.dataset, self.direction]
        row.extend(f"{self.recall[k]:.4f}" for k in sorted(self.recall))
        row.append("-" if self.map_value is None else f"{self.map_value:.4f}")
        return row


def evaluate(
    ckpt: Checkpoint,
    pairs: PairDataset,
    store: FeatureStore,
    labels: Optional[Mapping[str, str]] = None,
    direction: str = DIRECTION_T2I,
    ks: Sequence[int] = (1, 10, 20),
    map_r: int = 50,
    dataset_name: str = "",
) -> EvalReport:
    """Deterministic retrieval evaluation of a checkpoint on one pair set.

    txt2img encodes every pair text and ranks the feature store; img2txt
    ranks encoded texts against each pair's image embedding. mAP@R is
    computed only when a label map is supplied; text entries inherit the
    label of their paired image.
    """
    if direction not in (DIRECTION_T2I, DIRECTION_I2T):
        raise ConfigError(f"direction must be txt2img or img2txt, got {direction!r}")
    if not ks:
        raise ConfigError("at least one K is required")
    enc_cfg = ckpt.encoder
    if enc_cfg.output_dim != store.dim:
        raise ConfigError(
            f"checkpoint output_dim {enc_cfg.output_dim} != feature store dim {store.dim}"
        )
    params = ckpt.encoder_params()
    for _, image_id in pairs.samples:
        if image_id not in store:
            raise ConfigError(f"pair image id {image_id!r} missing from the feature store")

    seqs = [tokenize(text, enc_cfg.max_seq_len) for text, _ in pairs.samples]
    text_embs = encode_batch(seqs, params, enc_cfg, training=False)
    text_ids = [f"t{i}" for i in range(len(seqs))]

    if direction == DIRECTION_T2I:
        gallery_ids, gallery = store.as_index()
        index = RetrievalIndex(gallery_ids, gallery)
        queries = text_embs
        query_ids = text_ids
        ground_truth = {text_ids[i]: pairs.samples[i][1] for i in range(len(seqs))}
        query_labels = None
        if labels is not None:
            query_labels = {text_ids[i]: _label(labels, pairs.samples[i][1]) for i in range(len(seqs))}
            gallery_labels = {gid: _label(labels, gid) for gid in gallery_ids}
    else:
        index = RetrievalIndex(list(text_ids), text_embs)
        query_ids = [f"q{i}" for i in range(len(seqs))]
        queries = np.stack([store.vector(pairs.samples[i][1]) for i in range(len(seqs))])
        ground_truth = {query_ids[i]: text_ids[i] for i in range(len(seqs))}
        query_labels = None
        if labels is not None:
            query_labels = {
                query_ids[i]: _label(labels, pairs.samples[i][1]) for i in range(len(seqs))
            }
            gallery_labels = {
                text_ids[i]: _label(labels, pairs.samples[i][1]) for i in range(len(seqs))
            }

    ranked = rank_all(queries, index)
    rankings = {query_ids[i]: ranked[i] for i in range(len(query_ids))}
    recall = {int(k): recall_at_k(rankings, ground_truth, int(k)) for k in ks}
    map_value = None
    if labels is not None:
        ap_values = [
            average_precision(ranked[i], gallery_labels, query_labels[query_ids[i]], map_r)
            for i in range(len(query_ids))
        ]
        map_value = float(np.mean(ap_values))
    return EvalReport(
        dataset=dataset_name or pairs.source,
        direction=direction,
        query_count=len(query_ids),
        recall=recall,
        map_r=map_r if map_value is not None else None,
        map_value=map_value,
        config={
            "ks": [int(k) for k in ks],
            "map_r": map_r,
            "gallery_size": len(index),
            "checkpoint_epoch": ckpt.epoch,
        },
    )


def _label(labels: Mapping[str, str], image_id: str) -> str:
    label = labels.get(image_id)
    if label is None:
        raise ConfigError(f"id {image_id!r} has no label")
    return label
