"""Multi-task training orchestration.

Each step mines hard negatives inside the current caption and click batches,
encodes the texts with the shared encoder, averages the two source losses,
and applies one Adam update. The image side and the word vectors stay
frozen throughout. All randomness (init, shuffling, dropout) flows from one
seeded generator whose state is persisted in checkpoints, so an interrupted
run resumes bit-exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import Checkpoint, FeatureStore, PairDataset, load_stopwords, make_checkpoint, save_checkpoint
from .diffcore import AdamConfig, DTYPE_TRAIN, adam_step, clip_global_norm
from .errors import ConfigError, EmptyTextError, NumericError
from .losses import LossConfig, VARIANT_L2, batch_loss_with_grad, multitask_combine
from .mining import BatchSample, mine_negatives, normalize_mode
from .textenc import (
    EncoderConfig,
    EncoderParams,
    TokenSequence,
    WordVectorTable,
    encode_backward,
    encode_batch_training,
    init_params,
    tokenize,
)


@dataclass
class TrainConfig:
    encoder: EncoderConfig
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 512
    epochs: int = 30
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-4),)
    mining_mode: str = "any"
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables global-norm gradient clipping

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule must hold at least one (start_epoch, lr) pair")
        starts = [s for s, _ in self.lr_schedule]
        if starts[0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"lr_schedule epochs must increase strictly: {starts}")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be nonnegative, got {self.clip_norm}")
        self.mining_mode = normalize_mode(self.mining_mode)


def schedule_lr(schedule: Sequence[tuple[int, float]], epoch: int) -> float:
    lr = schedule[0][1]
    for start, value in schedule:
        if start <= epoch:
            lr = value
    return lr


# ---------------------------------------------------------------------------
# config files: `key = value` lines with '#' comments


_SCALAR_KEYS = {
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "clip_norm": float,
    "mining_mode": str,
    "lr_schedule": str,
    "loss.variant": str,
    "loss.eta": float,
    "loss.rho": float,
    "loss.n_negatives": int,
    "encoder.word_dim": int,
    "encoder.hidden_size": int,
    "encoder.num_layers": int,
    "encoder.dropout_rate": float,
    "encoder.max_seq_len": int,
    "encoder.output_dim": int,
}


def parse_config_text(text: str, path=None) -> dict[str, object]:
    """Parse the config format into typed values; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path or 'config'}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCALAR_KEYS:
            raise ConfigError(f"{path or 'config'}:{lineno}: unknown config key {key!r}")
        caster = _SCALAR_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError:
            raise ConfigError(
                f"{path or 'config'}:{lineno}: cannot parse {value!r} as {caster.__name__} for {key!r}"
            ) from None
    return values


def parse_lr_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """Parse `start:lr,start:lr,...`; a bare float means one rate from epoch 0."""
    items = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        if ":" in piece:
            start_s, _, lr_s = piece.partition(":")
            try:
                items.append((int(start_s.strip()), float(lr_s.strip())))
            except ValueError:
                raise ConfigError(f"bad lr_schedule entry {piece!r}") from None
        else:
            try:
                items.append((0, float(piece)))
            except ValueError:
                raise ConfigError(f"bad lr_schedule entry {piece!r}") from None
    if not items:
        raise ConfigError(f"empty lr_schedule {text!r}")
    return tuple(items)


def build_train_config(
    values: dict[str, object],
    default_word_dim: Optional[int] = None,
    default_output_dim: Optional[int] = None,
) -> TrainConfig:
    """Assemble a TrainConfig, filling encoder dims from the data files when
    the config does not pin them."""
    enc_kwargs = {}
    for f in ("word_dim", "hidden_size", "num_layers", "dropout_rate", "max_seq_len", "output_dim"):
        v = values.get(f"encoder.{f}")
        if v is not None:
            enc_kwargs[f] = v
    if "word_dim" not in enc_kwargs:
        if default_word_dim is None:
            raise ConfigError("encoder.word_dim is not set and cannot be inferred")
        enc_kwargs["word_dim"] = default_word_dim
    if "output_dim" not in enc_kwargs:
        if default_output_dim is None:
            raise ConfigError("encoder.output_dim is not set and cannot be inferred")
        enc_kwargs["output_dim"] = default_output_dim
    loss_kwargs = {
        k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("loss.")
    }
    train_kwargs = {}
    for f in ("epochs", "batch_size", "seed", "clip_norm", "mining_mode"):
        if f in values:
            train_kwargs[f] = values[f]
    if "lr_schedule" in values:
        train_kwargs["lr_schedule"] = parse_lr_schedule(values["lr_schedule"])
    return TrainConfig(
        encoder=EncoderConfig(**enc_kwargs),
        loss=LossConfig(**loss_kwargs),
        **train_kwargs,
    )


def load_train_config(
    path, default_word_dim: Optional[int] = None, default_output_dim: Optional[int] = None
) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid UTF-8: {exc}") from None
    return build_train_config(
        parse_config_text(text, path), default_word_dim, default_output_dim
    )


# ---------------------------------------------------------------------------
# batch construction


def make_epoch_index_batches(
    n_samples: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
    if n_samples < 1:
        raise ConfigError("cannot batch an empty dataset")
    perm = rng.permutation(n_samples)
    batches = []
    for start in range(0, n_samples, batch_size):
        chunk = perm[start : start + batch_size]
        if len(chunk) < 2:
            break
        batches.append(chunk)
    return batches


def make_epoch_batches(
    ds: PairDataset, batch_size: int, rng: np.random.Generator
) -> list[list[tuple[str, str]]]:
    """Shuffle and cut into consecutive batches; a trailing batch smaller
    than 2 samples is dropped."""
    return [
        [ds.samples[i] for i in chunk]
        for chunk in make_epoch_index_batches(len(ds.samples), batch_size, rng)
    ]


# ---------------------------------------------------------------------------
# step preparation


@dataclass
class PreparedBatch:
    seqs: list[TokenSequence]
    samples: list[BatchSample]
    positives: np.ndarray  # (B, D) constant image embeddings


def prepare_batch(
    pairs: Sequence[tuple[str, str]],
    store: FeatureStore,
    stop_words: frozenset[str],
    max_seq_len: int,
) -> PreparedBatch:
    seqs: list[TokenSequence] = []
    samples: list[BatchSample] = []
    vecs: list[np.ndarray] = []
    for idx, (text, image_id) in enumerate(pairs):
        try:
            seq = tokenize(text, max_seq_len, stop_words)
        except EmptyTextError as exc:
            raise EmptyTextError(f"pair (id={image_id!r}, text={text!r}): {exc}") from None
        try:
            vec = store.vector(image_id)
        except ConfigError:
            raise ConfigError(
                f"image id {image_id!r} (text {text!r}) is not in the feature store"
            ) from None
        seqs.append(seq)
        samples.append(BatchSample(idx, image_id, vec, seq.content_words))
        vecs.append(vec)
    return PreparedBatch(seqs=seqs, samples=samples, positives=np.stack(vecs))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    params: EncoderParams
    adam: AdamConfig
    rng: np.random.Generator
    config: TrainConfig


def init_state(cfg: TrainConfig, table: WordVectorTable) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.encoder, table, rng, dtype=DTYPE_TRAIN)
    adam = AdamConfig(learning_rate=schedule_lr(cfg.lr_schedule, 0))
    return TrainState(params=params, adam=adam, rng=rng, config=cfg)


def resume_state(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    if ckpt.encoder != cfg.encoder:
        raise ConfigError(
            f"checkpoint encoder config {ckpt.encoder} does not match training config {cfg.encoder}"
        )
    params = ckpt.encoder_params()
    rng = np.random.default_rng(cfg.seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return TrainState(params=params, adam=replace(ckpt.adam), rng=rng, config=cfg)


def _source_backward(
    batch: PreparedBatch, state: TrainState, scale: float
) -> float:
    """Mine, encode, compute the loss, and push scaled gradients into the
    encoder slots. Returns this source's batch loss."""
    cfg = state.config
    embs, caches = encode_batch_training(
        batch.seqs, state.params, cfg.encoder, training=True, rng=state.rng
    )
    dim = batch.positives.shape[1]
    if cfg.loss.variant == VARIANT_L2:
        empty = np.zeros((0, dim), dtype=batch.positives.dtype)
        negative_sets = [empty] * len(batch.samples)
    else:
        mined = mine_negatives(batch.samples, cfg.loss.n_negatives, cfg.mining_mode)
        negative_sets = [
            batch.positives[[j for j, _ in entry.negatives]] for entry in mined.entries
        ]
    loss, d_query = batch_loss_with_grad(embs, batch.positives, negative_sets, cfg.loss)
    for i, cache in enumerate(caches):
        encode_backward(cache, d_query[i] * scale, state.params, cfg.encoder)
    return loss


def train_step(
    state: TrainState,
    caption_batch: PreparedBatch,
    click_batch: Optional[PreparedBatch] = None,
) -> float:
    """One combined update; returns the (multi-task) loss for the step."""
    cfg = state.config
    if click_batch is None:
        combined = _source_backward(caption_batch, state, scale=1.0)
    else:
        loss_caption = _source_backward(caption_batch, state, scale=0.5)
        loss_click = _source_backward(click_batch, state, scale=0.5)
        combined = multitask_combine(loss_caption, loss_click)
    if not math.isfinite(combined):
        raise NumericError(
            f"non-finite training loss {combined!r} "
            f"(caption batch of {len(caption_batch.seqs)}"
            + (f", click batch of {len(click_batch.seqs)}" if click_batch else "")
            + ")"
        )
    if cfg.clip_norm > 0:
        clip_global_norm(state.params.trainable_slots(), cfg.clip_norm)
    adam_step(state.params.trainable_slots(), state.adam)
    return combined


def _validate_resolvable(ds: PairDataset, store: FeatureStore) -> None:
    for text, image_id in ds.samples:
        if image_id not in store:
            raise ConfigError(
                f"{ds.source} pair (id={image_id!r}, text={text[:60]!r}) "
                "references an image id missing from the feature store"
            )


def train(
    caption_ds: PairDataset,
    click_ds: Optional[PairDataset],
    store: FeatureStore,
    table: WordVectorTable,
    cfg: TrainConfig,
    out_path=None,
    stop_words: Optional[frozenset[str]] = None,
    log_fn: Optional[Callable[[int, float, float], None]] = None,
    resume_from: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Run the full epoch loop and return the final checkpoint.

    Multi-task when click_ds is given, single-source otherwise. The epoch
    covers every batch of the larger source; the smaller one reshuffles and
    cycles. Checkpoints are written to out_path after every epoch (temp file
    then atomic rename).
    """
    if cfg.encoder.output_dim != store.dim:
        raise ConfigError(
            f"encoder output_dim {cfg.encoder.output_dim} != feature store dim {store.dim}"
        )
    if stop_words is None:
        stop_words = load_stopwords()
    _validate_resolvable(caption_ds, store)
    if click_ds is not None:
        _validate_resolvable(click_ds, store)

    state = resume_state(resume_from, cfg) if resume_from else init_state(cfg, table)
    start_epoch = resume_from.epoch if resume_from else 0

    for epoch in range(start_epoch, cfg.epochs):
        state.adam.learning_rate = schedule_lr(cfg.lr_schedule, epoch)
        cap_batches = make_epoch_batches(caption_ds, cfg.batch_size, state.rng)
        if not cap_batches:
            raise ConfigError("caption dataset yields no batch of size >= 2")
        if click_ds is not None:
            click_base = make_epoch_batches(click_ds, cfg.batch_size, state.rng)
            if not click_base:
                raise ConfigError("click dataset yields no batch of size >= 2")
            n_steps = max(len(cap_batches), len(click_base))
            if len(cap_batches) < n_steps:
                while len(cap_batches) < n_steps:
                    cap_batches.extend(make_epoch_batches(caption_ds, cfg.batch_size, state.rng))
                cap_batches = cap_batches[:n_steps]
            click_batches = click_base
            while len(click_batches) < n_steps:
                click_batches.extend(make_epoch_batches(click_ds, cfg.batch_size, state.rng))
            click_batches = click_batches[:n_steps]
        else:
            n_steps = len(cap_batches)
            click_batches = None

        losses = []
        for step in range(n_steps):
            cap = prepare_batch(cap_batches[step], store, stop_words, cfg.encoder.max_seq_len)
            click = (
                prepare_batch(click_batches[step], store, stop_words, cfg.encoder.max_seq_len)
                if click_batches is not None
                else None
            )
            losses.append(train_step(state, cap, click))
        epoch_loss = float(np.mean(losses))
        if log_fn is not None:
            log_fn(epoch, epoch_loss, state.adam.learning_rate)
        if out_path is not None:
            ckpt = make_checkpoint(
                state.params, cfg.encoder, state.adam, epoch + 1, cfg.seed, state.rng
            )
            _atomic_save(ckpt, out_path)

    final = make_checkpoint(
        state.params, cfg.encoder, state.adam, cfg.epochs, cfg.seed, state.rng
    )
    if out_path is not None:
        _atomic_save(final, out_path)
    return final


def _atomic_save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)
