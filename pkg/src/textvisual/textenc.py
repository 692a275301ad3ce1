"""Text encoder: tokens -> frozen word vectors -> stacked LSTM -> projection.

Sequences are never padded: a length-L input runs exactly L recurrence steps
per layer, inter-layer dropout applies to every layer output except the top
one, and the top layer's final hidden state feeds a linear projection into
the image-feature space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import AbstractSet, Iterable, Optional, Sequence

import numpy as np

from .diffcore import (
    DTYPE_TRAIN,
    LSTMCellParams,
    ParamSlot,
    affine,
    affine_backward,
    dropout_forward,
    lstm_cell,
    lstm_cell_backward,
    require_finite,
)
from .errors import ConfigError, EmptyTextError, TextVisualError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    content_words: frozenset[str]


def tokenize(
    text: str, max_seq_len: int, stop_words: AbstractSet[str] = frozenset()
) -> TokenSequence:
    """Lowercase, split on runs of non-alphanumeric characters, truncate.

    content_words is the token set minus stop words; it may legally be
    empty. Raises EmptyTextError when nothing survives splitting.
    """
    if max_seq_len < 1:
        raise ConfigError(f"max_seq_len must be >= 1, got {max_seq_len}")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise EmptyTextError(f"no tokens after normalizing text: {text!r}")
    tokens = tuple(tokens[:max_seq_len])
    return TokenSequence(tokens, frozenset(tokens) - frozenset(stop_words))


@dataclass
class WordVectorTable:
    """Vocabulary plus a (V, dim) matrix of frozen word vectors."""

    dim: int
    vocab: dict[str, int]
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != self.dim:
            raise ConfigError(
                f"word vector matrix shape {self.matrix.shape} does not match dim {self.dim}"
            )
        if self.vocab and max(self.vocab.values()) >= self.matrix.shape[0]:
            raise ConfigError("vocabulary index exceeds word vector matrix rows")

    def __len__(self) -> int:
        return self.matrix.shape[0]


def lookup(seq: TokenSequence, table: WordVectorTable) -> np.ndarray:
    """Stack per-token vectors into (len, dim); out-of-vocabulary rows are zero."""
    out = np.zeros((len(seq.tokens), table.dim), dtype=table.matrix.dtype)
    vocab = table.vocab
    for t, tok in enumerate(seq.tokens):
        idx = vocab.get(tok)
        if idx is not None:
            out[t] = table.matrix[idx]
    return out


@dataclass
class EncoderConfig:
    word_dim: int
    hidden_size: int = 256
    num_layers: int = 5
    dropout_rate: float = 0.25
    max_seq_len: int = 18
    output_dim: int = 0  # must match the feature store at train/eval time

    def __post_init__(self):
        if self.word_dim < 1:
            raise ConfigError(f"word_dim must be positive, got {self.word_dim}")
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0,1), got {self.dropout_rate}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.output_dim < 1:
            raise ConfigError(f"output_dim must be positive, got {self.output_dim}")


@dataclass
class EncoderParams:
    """All trainable tensors plus the frozen word-vector table.

    Layer cell parameters alias the slot arrays, so in-place optimizer
    updates are immediately visible to the forward pass.
    """

    layers: list[LSTMCellParams]
    proj_w: ParamSlot
    proj_b: ParamSlot
    word_vectors: ParamSlot  # trainable=False, aliases table.matrix
    table: WordVectorTable
    layer_slots: list[tuple[ParamSlot, ParamSlot, ParamSlot]]

    def slots(self) -> list[ParamSlot]:
        out: list[ParamSlot] = []
        for wx, wh, b in self.layer_slots:
            out.extend((wx, wh, b))
        out.extend((self.proj_w, self.proj_b, self.word_vectors))
        return out

    def trainable_slots(self) -> list[ParamSlot]:
        return [s for s in self.slots() if s.trainable]

    def parameter_count(self) -> int:
        return sum(s.value.size for s in self.trainable_slots())


def init_params(
    cfg: EncoderConfig,
    table: WordVectorTable,
    rng: np.random.Generator,
    dtype=DTYPE_TRAIN,
) -> EncoderParams:
    """Seeded initialization: weights uniform(-1/sqrt(H), 1/sqrt(H)),
    forget-gate bias 1, all other biases 0."""
    if cfg.word_dim != table.dim:
        raise ConfigError(
            f"config word_dim {cfg.word_dim} != word vector dim {table.dim}"
        )
    h = cfg.hidden_size
    bound = 1.0 / np.sqrt(h)
    layers: list[LSTMCellParams] = []
    layer_slots: list[tuple[ParamSlot, ParamSlot, ParamSlot]] = []
    for l in range(cfg.num_layers):
        in_size = cfg.word_dim if l == 0 else h
        wx = rng.uniform(-bound, bound, (in_size, 4 * h)).astype(dtype)
        wh = rng.uniform(-bound, bound, (h, 4 * h)).astype(dtype)
        b = np.zeros(4 * h, dtype=dtype)
        b[h : 2 * h] = 1.0  # forget gate opens at init
        cell = LSTMCellParams(wx=wx, wh=wh, b=b)
        slots = (
            ParamSlot(f"enc.lstm{l}.wx", wx),
            ParamSlot(f"enc.lstm{l}.wh", wh),
            ParamSlot(f"enc.lstm{l}.b", b),
        )
        layers.append(cell)
        layer_slots.append(slots)
    proj_w = ParamSlot("enc.proj.w", rng.uniform(-bound, bound, (h, cfg.output_dim)).astype(dtype))
    proj_b = ParamSlot("enc.proj.b", np.zeros(cfg.output_dim, dtype=dtype))
    word_slot = ParamSlot("wordvec.matrix", table.matrix, trainable=False)
    return EncoderParams(
        layers=layers,
        proj_w=proj_w,
        proj_b=proj_b,
        word_vectors=word_slot,
        table=table,
        layer_slots=layer_slots,
    )


def check_shapes(params: EncoderParams, cfg: EncoderConfig) -> None:
    if len(params.layers) != cfg.num_layers:
        raise ConfigError(
            f"params hold {len(params.layers)} layers, config says {cfg.num_layers}"
        )
    h = cfg.hidden_size
    for l, cell in enumerate(params.layers):
        expect_in = cfg.word_dim if l == 0 else h
        if cell.wx.shape != (expect_in, 4 * h):
            raise ConfigError(
                f"layer {l} wx shape {cell.wx.shape} != {(expect_in, 4 * h)}"
            )
        cell.check()
    if params.proj_w.value.shape != (h, cfg.output_dim) or params.proj_b.value.shape != (
        cfg.output_dim,
    ):
        raise ConfigError("projection shapes do not match the encoder config")


@dataclass
class EncodeCache:
    cell_caches: list[list[tuple]]  # [layer][t]
    masks: list[Optional[np.ndarray]]  # scaled dropout masks per non-top layer
    top_h_last: np.ndarray  # (1, H)


def _forward(
    seq: TokenSequence,
    params: EncoderParams,
    cfg: EncoderConfig,
    training: bool,
    rng: Optional[np.random.Generator],
    want_cache: bool,
) -> tuple[np.ndarray, Optional[EncodeCache]]:
    dtype = params.proj_w.value.dtype
    x_seq = lookup(seq, params.table)
    steps = x_seq.shape[0]
    h_dim = cfg.hidden_size
    cell_caches: list[list[tuple]] = []
    masks: list[Optional[np.ndarray]] = []
    for l, cell in enumerate(params.layers):
        h = np.zeros((1, h_dim), dtype=dtype)
        c = np.zeros((1, h_dim), dtype=dtype)
        outs = np.empty((steps, h_dim), dtype=dtype)
        layer_cache = [] if want_cache else None
        for t in range(steps):
            h, c, cache = lstm_cell(x_seq[t : t + 1], h, c, cell)
            outs[t] = h[0]
            if want_cache:
                layer_cache.append(cache)
        if want_cache:
            cell_caches.append(layer_cache)
        if l < cfg.num_layers - 1:
            if training and cfg.dropout_rate > 0.0:
                outs, mask = dropout_forward(outs, cfg.dropout_rate, rng)
            else:
                mask = None
            if want_cache:
                masks.append(mask)
        x_seq = outs
    top_h_last = x_seq[steps - 1 : steps]
    out = affine(top_h_last, params.proj_w.value, params.proj_b.value)
    cache = EncodeCache(cell_caches, masks, top_h_last) if want_cache else None
    return out[0], cache


def encode(
    seq: TokenSequence,
    params: EncoderParams,
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Embed one token sequence into the image-feature space (output_dim,)."""
    check_shapes(params, cfg)
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ConfigError("training-mode encode with dropout needs an rng")
    out, _ = _forward(seq, params, cfg, training, rng, want_cache=False)
    return require_finite("encoder output", out)


def encode_batch(
    seqs: Sequence[TokenSequence],
    params: EncoderParams,
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Encode a batch, sample by sample, into a (B, output_dim) matrix.

    Training mode consumes the dropout stream in sample order; inference is
    independent of batch grouping.
    """
    out, _ = encode_batch_training(seqs, params, cfg, training, rng, want_caches=False)
    return out


def encode_batch_training(
    seqs: Sequence[TokenSequence],
    params: EncoderParams,
    cfg: EncoderConfig,
    training: bool = True,
    rng: Optional[np.random.Generator] = None,
    want_caches: bool = True,
) -> tuple[np.ndarray, Optional[list[EncodeCache]]]:
    """encode_batch variant that also returns per-sample backward caches."""
    if not seqs:
        raise ConfigError("encode_batch needs a non-empty batch")
    check_shapes(params, cfg)
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ConfigError("training-mode encode with dropout needs an rng")
    out = np.empty((len(seqs), cfg.output_dim), dtype=params.proj_w.value.dtype)
    caches: list[EncodeCache] = []
    for i, seq in enumerate(seqs):
        try:
            emb, cache = _forward(seq, params, cfg, training, rng, want_caches)
        except TextVisualError as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
        out[i] = emb
        if want_caches:
            caches.append(cache)
    require_finite("encoder batch output", out)
    return out, (caches if want_caches else None)


def encode_backward(
    cache: EncodeCache,
    d_out: np.ndarray,
    params: EncoderParams,
    cfg: EncoderConfig,
) -> None:
    """Accumulate gradients of one sample's embedding into the param slots.

    d_out has shape (output_dim,). Word vectors are frozen, so the gradient
    flowing out of layer 0 is dropped.
    """
    d_out2 = d_out.reshape(1, -1)
    _, d_pw, d_pb = affine_backward(cache.top_h_last, params.proj_w.value, d_out2)
    params.proj_w.add_grad(d_pw)
    params.proj_b.add_grad(d_pb)

    steps = len(cache.cell_caches[0])
    h_dim = cfg.hidden_size
    dtype = cache.top_h_last.dtype
    # gradient on the top layer's (post-dropout-free) output sequence
    d_seq = np.zeros((steps, h_dim), dtype=dtype)
    d_seq[steps - 1] = (d_out2 @ params.proj_w.value.T)[0]

    for l in range(cfg.num_layers - 1, -1, -1):
        cell = params.layers[l]
        wx_slot, wh_slot, b_slot = params.layer_slots[l]
        acc_wx = np.zeros_like(cell.wx)
        acc_wh = np.zeros_like(cell.wh)
        acc_b = np.zeros_like(cell.b)
        d_h_next = np.zeros((1, h_dim), dtype=dtype)
        d_c_next = np.zeros((1, h_dim), dtype=dtype)
        d_x_seq = np.empty((steps, cell.input_size), dtype=dtype) if l > 0 else None
        layer_cache = cache.cell_caches[l]
        for t in range(steps - 1, -1, -1):
            d_h = d_seq[t : t + 1] + d_h_next
            d_x, d_h_next, d_c_next, d_wx, d_wh, d_b = lstm_cell_backward(
                layer_cache[t], d_h, d_c_next, cell
            )
            acc_wx += d_wx
            acc_wh += d_wh
            acc_b += d_b
            if l > 0:
                d_x_seq[t] = d_x[0]
        wx_slot.add_grad(acc_wx)
        wh_slot.add_grad(acc_wh)
        b_slot.add_grad(acc_b)
        if l > 0:
            mask = cache.masks[l - 1]
            d_seq = d_x_seq if mask is None else d_x_seq * mask
