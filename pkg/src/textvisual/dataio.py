"""Readers and writers for every on-disk format.

Formats: word-vector text files, the binary/TSV image-feature store, pair
datasets, stop-word lists, and training checkpoints. All binary values are
little-endian; loaders reject malformed input with the offending line or
offset instead of truncating silently.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .diffcore import AdamConfig, ParamSlot
from .errors import ConfigError, DataFormatError
from .textenc import EncoderConfig, EncoderParams, WordVectorTable
from . import textenc

FEATURE_MAGIC = b"PVF1"
CHECKPOINT_MAGIC = b"PATR"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# word vectors


def _read_utf8(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"file is not valid UTF-8: {exc}", path) from None


def load_word_vectors(path) -> WordVectorTable:
    """Parse `<count> <dim>` header plus `<word> <f1> ... <fdim>` lines.

    Duplicate words keep their first occurrence and emit a warning.
    """
    path = Path(path)
    text = _read_utf8(path)
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("empty word vector file", path, 1)
    head = lines[0].split()
    if len(head) != 2:
        raise DataFormatError(f"header must be '<count> <dim>', got {lines[0]!r}", path, 1)
    try:
        count, dim = int(head[0]), int(head[1])
    except ValueError:
        raise DataFormatError(f"non-integer header fields: {lines[0]!r}", path, 1) from None
    if count < 0 or dim < 1:
        raise DataFormatError(f"invalid header values count={count} dim={dim}", path, 1)
    if len(lines) - 1 != count:
        raise DataFormatError(
            f"header declares {count} entries but file has {len(lines) - 1} data lines", path
        )

    vocab: dict[str, int] = {}
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise DataFormatError(
                f"expected a word plus {dim} floats, got {len(parts)} fields", path, lineno
            )
        word = parts[0]
        try:
            vec = np.array([float(p) for p in parts[1:]], dtype=np.float32)
        except ValueError as exc:
            raise DataFormatError(f"bad float: {exc}", path, lineno) from None
        if not np.isfinite(vec).all():
            raise DataFormatError("non-finite vector component", path, lineno)
        if word in vocab:
            warnings.warn(f"duplicate word {word!r} at {path}:{lineno}; first occurrence wins")
            continue
        vocab[word] = len(rows)
        rows.append(vec)
    matrix = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return WordVectorTable(dim=dim, vocab=vocab, matrix=matrix)


def write_word_vectors(table: WordVectorTable, path) -> None:
    """Inverse of load_word_vectors (used for fixtures and round-trips)."""
    words = sorted(table.vocab, key=table.vocab.get)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(words)} {table.dim}\n")
        for w in words:
            vals = " ".join(repr(float(v)) for v in table.matrix[table.vocab[w]])
            fh.write(f"{w} {vals}\n")


# ---------------------------------------------------------------------------
# feature store


@dataclass
class FeatureStore:
    """image_id -> fixed-dimension embedding; the frozen visual space."""

    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"feature dimension must be positive, got {self.dim}")

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.records

    def add(self, image_id: str, vec: np.ndarray) -> None:
        if image_id in self.records:
            raise DataFormatError(f"duplicate image id {image_id!r}")
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ConfigError(f"feature for {image_id!r} has shape {vec.shape}, want ({self.dim},)")
        if not np.isfinite(vec).all():
            raise DataFormatError(f"non-finite feature values for id {image_id!r}")
        self.records[image_id] = vec

    def vector(self, image_id: str) -> np.ndarray:
        try:
            return self.records[image_id]
        except KeyError:
            raise ConfigError(f"image id {image_id!r} missing from the feature store") from None

    def as_index(self) -> tuple[list[str], np.ndarray]:
        """Insertion-ordered ids plus the stacked (M, dim) matrix."""
        ids = list(self.records)
        if not ids:
            return ids, np.zeros((0, self.dim), dtype=np.float32)
        return ids, np.stack([self.records[i] for i in ids])


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}", path)
    return buf


def load_features(path) -> FeatureStore:
    """Load the binary feature format, falling back to TSV when the magic
    bytes are absent."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != FEATURE_MAGIC:
            return _load_features_tsv(path)
        count, dim = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if dim < 1:
            raise DataFormatError(f"feature dim must be positive, got {dim}", path)
        store = FeatureStore(dim=dim)
        for rec in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, path, f"record {rec} id length"))
            raw_id = _read_exact(fh, id_len, path, f"record {rec} id")
            try:
                image_id = raw_id.decode("utf-8")
            except UnicodeDecodeError:
                raise DataFormatError(f"record {rec}: id is not valid UTF-8", path) from None
            payload = _read_exact(fh, 4 * dim, path, f"record {rec} values")
            vec = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            try:
                store.add(image_id, vec)
            except DataFormatError as exc:
                raise DataFormatError(f"record {rec}: {exc}", path) from None
        if fh.read(1):
            raise DataFormatError(f"trailing bytes after {count} records", path)
    return store


def _load_features_tsv(path: Path) -> FeatureStore:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise DataFormatError(
            "bad magic bytes and content is not UTF-8 text: neither binary nor TSV features",
            path,
        ) from None
    store: Optional[FeatureStore] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataFormatError("feature line has no tab separator", path, lineno)
        image_id, _, values = line.partition("\t")
        parts = values.split(",")
        try:
            vec = np.array([float(p) for p in parts], dtype=np.float32)
        except ValueError as exc:
            raise DataFormatError(f"bad float: {exc}", path, lineno) from None
        if store is None:
            store = FeatureStore(dim=vec.shape[0])
        elif vec.shape[0] != store.dim:
            raise DataFormatError(
                f"feature has {vec.shape[0]} components, expected {store.dim}", path, lineno
            )
        try:
            store.add(image_id, vec)
        except (DataFormatError, ConfigError) as exc:
            raise DataFormatError(str(exc), path, lineno) from None
    if store is None:
        raise DataFormatError("no feature records found (empty TSV)", path)
    return store


def write_features(store: FeatureStore, path, binary: bool = True) -> None:
    """Serialize a feature store (binary by default, TSV otherwise)."""
    path = Path(path)
    if binary:
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<II", len(store.records), store.dim))
            for image_id, vec in store.records.items():
                raw = image_id.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise ConfigError(f"image id longer than 65535 bytes: {image_id[:40]!r}...")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(vec.astype("<f4", copy=False).tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, vec in store.records.items():
            if "\t" in image_id or "\n" in image_id or "\r" in image_id:
                raise ConfigError(f"image id {image_id!r} cannot be written as TSV")
            fh.write(image_id)
            fh.write("\t")
            fh.write(",".join(repr(float(v)) for v in vec))
            fh.write("\n")


# ---------------------------------------------------------------------------
# pair datasets


@dataclass
class PairDataset:
    """Ordered (text, image_id) supervision pairs from one source."""

    source: str  # "caption" or "click"
    samples: list[tuple[str, str]]

    def __post_init__(self):
        if self.source not in ("caption", "click"):
            raise ConfigError(f"pair source must be 'caption' or 'click', got {self.source!r}")
        if not self.samples:
            raise ConfigError("pair dataset is empty")

    def __len__(self) -> int:
        return len(self.samples)


def load_pairs(path, source_tag: str) -> PairDataset:
    """Parse `<image_id>\\t<text>` lines; blank lines skipped, CRLF tolerated."""
    path = Path(path)
    samples: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8", newline="", errors="strict") as fh:
        try:
            lines = fh.readlines()
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"file is not valid UTF-8: {exc}", path) from None
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError("pair line has no tab separator", path, lineno)
            image_id, _, text = line.partition("\t")
            if not image_id:
                raise DataFormatError("empty image id", path, lineno)
            if not text.strip():
                raise DataFormatError("empty pair text", path, lineno)
            samples.append((text, image_id))
    if not samples:
        raise DataFormatError("no pairs found", path)
    return PairDataset(source=source_tag, samples=samples)


# ---------------------------------------------------------------------------
# labels


def load_labels(path) -> dict[str, str]:
    """Parse `<id>\\t<label>` lines into a label map."""
    path = Path(path)
    labels: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        try:
            lines = fh.readlines()
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"file is not valid UTF-8: {exc}", path) from None
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError("label line has no tab separator", path, lineno)
            image_id, _, label = line.partition("\t")
            if not image_id or not label:
                raise DataFormatError("label line needs both id and label", path, lineno)
            if image_id in labels:
                raise DataFormatError(f"duplicate label for id {image_id!r}", path, lineno)
            labels[image_id] = label
    if not labels:
        raise DataFormatError("no labels found", path)
    return labels


# ---------------------------------------------------------------------------
# stop words


def load_stopwords(path=None) -> frozenset[str]:
    """One token per line; None loads the vendored default English list."""
    if path is None:
        text = resources.files("textvisual").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = _read_utf8(Path(path))
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Self-contained training state: config, tensors, optimizer, word table."""

    encoder: EncoderConfig
    tensors: dict[str, np.ndarray]  # name -> float32 array (sorted on save)
    adam: AdamConfig
    epoch: int
    seed: int
    rng_state: Optional[dict]
    vocab: tuple[str, ...]

    def word_table(self) -> WordVectorTable:
        matrix = self.tensors["wordvec.matrix"]
        return WordVectorTable(
            dim=matrix.shape[1],
            vocab={w: i for i, w in enumerate(self.vocab)},
            matrix=matrix,
        )

    def encoder_params(self) -> EncoderParams:
        """Rebuild live EncoderParams (with Adam moments) from the tensors."""
        table = self.word_table()
        params = textenc.init_params(
            self.encoder, table, np.random.default_rng(0), dtype=np.float32
        )
        for slot in params.slots():
            if not slot.trainable:
                continue
            stored = self.tensors.get(slot.name)
            if stored is None:
                raise DataFormatError(f"checkpoint is missing tensor {slot.name!r}")
            slot.value[...] = stored
            m = self.tensors.get(f"opt.m.{slot.name}")
            v = self.tensors.get(f"opt.v.{slot.name}")
            if m is not None:
                slot.adam_m = m.copy()
            if v is not None:
                slot.adam_v = v.copy()
        return params


def make_checkpoint(
    params: EncoderParams,
    encoder_cfg: EncoderConfig,
    adam: AdamConfig,
    epoch: int,
    seed: int,
    rng: Optional[np.random.Generator] = None,
) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for slot in params.slots():
        tensors[slot.name] = slot.value
        if slot.trainable and slot.adam_m is not None:
            tensors[f"opt.m.{slot.name}"] = slot.adam_m
            tensors[f"opt.v.{slot.name}"] = slot.adam_v
    vocab = tuple(sorted(params.table.vocab, key=params.table.vocab.get))
    state = None
    if rng is not None:
        state = json.loads(json.dumps(rng.bit_generator.state))
    return Checkpoint(
        encoder=encoder_cfg,
        tensors=tensors,
        adam=adam,
        epoch=epoch,
        seed=seed,
        rng_state=state,
        vocab=vocab,
    )


_ENCODER_FIELDS = ("word_dim", "hidden_size", "num_layers", "dropout_rate", "max_seq_len", "output_dim")
_ADAM_FIELDS = ("learning_rate", "beta1", "beta2", "epsilon", "step_count")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic PATR, u32 version, a canonical JSON header, then raw
    little-endian float32 tensor payloads in header order."""
    names = sorted(ckpt.tensors)
    header = {
        "adam": {f: getattr(ckpt.adam, f) for f in _ADAM_FIELDS},
        "encoder": {f: getattr(ckpt.encoder, f) for f in _ENCODER_FIELDS},
        "meta": {"epoch": ckpt.epoch, "rng_state": ckpt.rng_state, "seed": ckpt.seed},
        "tensors": [[n, list(ckpt.tensors[n].shape)] for n in names],
        "vocab": list(ckpt.vocab),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(ckpt.tensors[n].astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}", path)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})", path
            )
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, path, "header length"))
        blob = _read_exact(fh, blob_len, path, "header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"corrupt checkpoint header: {exc}", path) from None
        try:
            encoder = EncoderConfig(**header["encoder"])
            adam = AdamConfig(**header["adam"])
            meta = header["meta"]
            tensor_index = header["tensors"]
            vocab = tuple(header["vocab"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise DataFormatError(f"invalid checkpoint header: {exc}", path) from None
        tensors: dict[str, np.ndarray] = {}
        for name, shape in tensor_index:
            size = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * size, path, f"tensor {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
            if not np.isfinite(arr).all():
                raise DataFormatError(f"non-finite values in tensor {name!r}", path)
            tensors[name] = arr
        if fh.read(1):
            raise DataFormatError("trailing bytes after tensor payloads", path)

    ckpt = Checkpoint(
        encoder=encoder,
        tensors=tensors,
        adam=adam,
        epoch=int(meta["epoch"]),
        seed=int(meta["seed"]),
        rng_state=meta.get("rng_state"),
        vocab=vocab,
    )
    _validate_checkpoint_shapes(ckpt, path)
    return ckpt


def _validate_checkpoint_shapes(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.encoder
    h = cfg.hidden_size
    expected = {"enc.proj.w": (h, cfg.output_dim), "enc.proj.b": (cfg.output_dim,)}
    for l in range(cfg.num_layers):
        in_size = cfg.word_dim if l == 0 else h
        expected[f"enc.lstm{l}.wx"] = (in_size, 4 * h)
        expected[f"enc.lstm{l}.wh"] = (h, 4 * h)
        expected[f"enc.lstm{l}.b"] = (4 * h,)
    for name, shape in expected.items():
        arr = ckpt.tensors.get(name)
        if arr is None:
            raise DataFormatError(f"checkpoint is missing tensor {name!r}", path)
        if arr.shape != shape:
            raise DataFormatError(
                f"tensor {name!r} has shape {arr.shape}, config implies {shape}", path
            )
    wv = ckpt.tensors.get("wordvec.matrix")
    if wv is None:
        raise DataFormatError("checkpoint is missing tensor 'wordvec.matrix'", path)
    if wv.shape != (len(ckpt.vocab), cfg.word_dim):
        raise DataFormatError(
            f"word vector matrix shape {wv.shape} does not match vocab size "
            f"{len(ckpt.vocab)} and word_dim {cfg.word_dim}",
            path,
        )
