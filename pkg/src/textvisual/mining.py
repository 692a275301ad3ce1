"""In-batch hard-negative mining.

For every positive image embedding in a batch, candidates that lexically
overlap the positive's content words are removed and the N nearest
survivors (squared distance, ties to the lower batch index) become its
negatives. If a filter eliminates everyone, the filter relaxes:
any-overlap -> all-overlap -> single nearest unfiltered sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, MiningError

MODE_ANY = "any-overlap"
MODE_ALL = "all-overlap"
MODE_UNFILTERED = "unfiltered"

_MODE_ALIASES = {
    "any": MODE_ANY,
    "any-overlap": MODE_ANY,
    "all": MODE_ALL,
    "all-overlap": MODE_ALL,
}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ConfigError(f"unknown mining mode {mode!r} (use 'any' or 'all')") from None


@dataclass(frozen=True)
class BatchSample:
    index: int
    image_id: str
    image_vec: np.ndarray
    content_words: frozenset[str]


@dataclass(frozen=True)
class MinedNegatives:
    positive_index: int
    negatives: tuple[tuple[int, float], ...]  # (batch index, sq dist), ascending
    filter_mode_used: str


@dataclass
class MinedTriplets:
    entries: list[MinedNegatives]
    n: int
    mode: str  # requested mode


def _pairwise(vecs: np.ndarray) -> np.ndarray:
    """All-pairs squared distances, row-chunked to bound memory.

    Each element is the plain sum of squared differences, bitwise equal to
    squared_distance on the pair.
    """
    b, dim = vecs.shape
    out = np.empty((b, b), dtype=vecs.dtype)
    chunk = max(1, (1 << 24) // max(1, b * dim))
    for start in range(0, b, chunk):
        stop = min(b, start + chunk)
        diff = vecs[start:stop, None, :] - vecs[None, :, :]
        out[start:stop] = np.sum(diff * diff, axis=-1)
    return out


def pairwise_sq_dist(batch: Sequence[BatchSample]) -> np.ndarray:
    """(B, B) matrix of squared distances between batch image embeddings."""
    dims = {s.image_vec.shape for s in batch}
    if len(dims) > 1 or any(len(d) != 1 for d in dims):
        raise ConfigError(f"batch image vectors disagree on dimension: {sorted(dims)}")
    return _pairwise(np.stack([s.image_vec for s in batch]))


def lexical_filter(positive: BatchSample, candidate: BatchSample, mode: str) -> bool:
    """True when the candidate survives the lexical-overlap filter.

    any-overlap removes candidates sharing any content word with the
    positive; all-overlap removes only candidates containing every content
    word of the positive. An empty positive content set keeps everything in
    both modes (the subset rule would otherwise reject every candidate).
    """
    mode = normalize_mode(mode)
    pos_words = positive.content_words
    if mode == MODE_ANY or not pos_words:
        return not (pos_words & candidate.content_words)
    return not (pos_words <= candidate.content_words)


def mine_negatives(
    batch: Sequence[BatchSample], n: int, mode: str
) -> MinedTriplets:
    """Select up to n nearest lexically-disjoint negatives per positive.

    Candidates never include the positive itself or any sample with the same
    image_id. Pure function of its inputs: identical calls return identical
    results; ties break toward the lower batch index.
    """
    requested = normalize_mode(mode)
    if len(batch) < 2:
        raise ConfigError(f"mining needs a batch of at least 2 samples, got {len(batch)}")
    if n < 1:
        raise ConfigError(f"mining needs n >= 1, got {n}")

    dists = pairwise_sq_dist(batch)

    # content-word bitmasks over the batch-local vocabulary
    word_bit: dict[str, int] = {}
    masks: list[int] = []
    for s in batch:
        m = 0
        for w in s.content_words:
            bit = word_bit.setdefault(w, len(word_bit))
            m |= 1 << bit
        masks.append(m)

    ids = [s.image_id for s in batch]
    entries: list[MinedNegatives] = []
    for i in range(len(batch)):
        row = dists[i]
        order = np.argsort(row, kind="stable")
        pos_id = ids[i]
        pos_mask = masks[i]

        chain = [requested]
        if requested == MODE_ANY:
            chain.append(MODE_ALL)
        if pos_mask == 0:
            # all content words were stop words: no lexical signal, both
            # modes degrade to keep-everything
            chain = [MODE_ANY]

        picked: list[tuple[int, float]] = []
        mode_used = chain[0]
        for try_mode in chain:
            picked.clear()
            mode_used = try_mode
            for j in order:
                if j == i or ids[j] == pos_id:
                    continue
                joint = pos_mask & masks[j]
                if try_mode == MODE_ANY:
                    if joint:
                        continue
                elif joint == pos_mask:  # candidate words cover the positive's
                    continue
                picked.append((int(j), float(row[j])))
                if len(picked) == n:
                    break
            if picked:
                break

        if not picked:
            # nearest distinct-image sample, ignoring text entirely
            for j in order:
                if j != i and ids[j] != pos_id:
                    picked.append((int(j), float(row[j])))
                    break
            mode_used = MODE_UNFILTERED
            if not picked:
                raise MiningError(
                    f"no negative candidate for batch index {i}: every other "
                    f"sample shares image_id {pos_id!r}"
                )
        entries.append(MinedNegatives(i, tuple(picked), mode_used))
    return MinedTriplets(entries=entries, n=n, mode=requested)
