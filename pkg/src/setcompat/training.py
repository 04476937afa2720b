"""Adam optimization of the scorer with validation-based early stopping,
plus the versioned checkpoint container (magic ``FRNC``).
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import evaluation, tensor as af
from .data import Vocabulary
from .errors import ConfigError, EngineError, InputError
from .model import (
    ItemInput,
    ModelConfig,
    ModelParams,
    forward_logits,
    init_params,
    parameter_shapes,
)
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"FRNC"
CHECKPOINT_VERSION = 1

LabeledOutfit = tuple[Sequence[ItemInput], int]


class CheckpointError(EngineError, ValueError):
    """Checkpoint file is malformed, truncated, or of the wrong version."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must be in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")


@dataclass
class AdamState:
    """First/second moment estimates per parameter; t counts optimizer steps."""

    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
        u={n: np.zeros_like(t.data) for n, t in params.named_tensors()},
    )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in params.named_tensors():
        g = grads[name]
        if g.shape != t.data.shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, expected {t.data.shape}")
        m = state.m[name]
        u = state.u[name]
        m *= b1
        m += (1.0 - b1) * g
        u *= b2
        u += (1.0 - b2) * (g * g)
        t.data -= config.learning_rate * (m / c1) / (np.sqrt(u / c2) + config.eps_adam)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _group_by_size(batch: Sequence[LabeledOutfit]) -> list[tuple[list[Sequence[ItemInput]], np.ndarray]]:
    by_size: dict[int, list[LabeledOutfit]] = {}
    for items, label in batch:
        by_size.setdefault(len(items), []).append((items, label))
    groups = []
    for n in sorted(by_size):
        members = by_size[n]
        groups.append(
            ([items for items, _ in members], np.asarray([lbl for _, lbl in members]))
        )
    return groups


def batch_loss(
    params: ModelParams,
    batch: Sequence[LabeledOutfit],
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its parameter gradients.

    Outfits are grouped by size so each group is one batched forward;
    the loss is identical (within rounding) to averaging per-outfit
    losses. ``mode`` controls dropout only.
    """
    if not batch:
        raise InputError("batch_loss needs a non-empty batch")
    tape = Tape()
    with tape:
        for _, t in params.named_tensors():
            tape.watch(t)
        total: Optional[Tensor] = None
        for outfits, labels in _group_by_size(batch):
            logits, _ = forward_logits(params, outfits, mode, rng)
            group_sum, _probs = af.softmax_cross_entropy_rows(logits, labels)
            total = group_sum if total is None else af.add(total, group_sum)
        loss = af.scale(total, 1.0 / len(batch))
    raw = backward(tape, loss)
    return float(loss.data), params.grads_by_name(raw)


def batch_loss_value(params: ModelParams, batch: Sequence[LabeledOutfit]) -> float:
    """Eval-mode mean cross-entropy without recording gradients."""
    if not batch:
        raise InputError("batch_loss_value needs a non-empty batch")
    total = 0.0
    for outfits, labels in _group_by_size(batch):
        logits, _ = forward_logits(params, outfits, mode="eval")
        losses, _ = af._softmax_ce_rows(logits.data, np.asarray(labels, dtype=np.int64))
        total += float(losses.sum())
    return total / len(batch)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    valid_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time_s: float = 0.0

    def metrics_rows(self) -> list[dict]:
        """Per-epoch rows for the metrics log (no timing, so logs are reproducible)."""
        return [
            {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "valid_loss": self.valid_loss[i],
                "valid_auc": self.valid_auc[i],
            }
            for i in range(len(self.train_loss))
        ]


def train(
    model_config: ModelConfig,
    train_data: Sequence[LabeledOutfit],
    valid_data: Sequence[LabeledOutfit],
    config: TrainConfig,
    initial_params: Optional[ModelParams] = None,
) -> tuple[ModelParams, TrainReport]:
    """Train with shuffled mini-batches; return the best-validation params.

    Stops once the count of consecutive epochs without a validation-loss
    improvement exceeds ``patience``, or at ``max_epochs``. Both splits
    must already contain their negatives.
    """
    if not train_data or not valid_data:
        raise InputError("train and valid data must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = initial_params if initial_params is not None else init_params(model_config, rng)
    state = init_adam_state(params)
    report = TrainReport()
    best = params.copy()
    best_val = float("inf")
    bad_epochs = 0
    started = time.monotonic()
    n = len(train_data)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, config.batch_size):
            batch = [train_data[i] for i in order[lo : lo + config.batch_size]]
            loss, grads = batch_loss(params, batch, mode="train", rng=rng)
            adam_step(params, grads, state, config)
            loss_sum += loss * len(batch)
        report.train_loss.append(loss_sum / n)
        valid_loss = batch_loss_value(params, valid_data)
        report.valid_loss.append(valid_loss)
        report.valid_auc.append(_validation_auc(params, valid_data))
        report.stopped_epoch = epoch
        if valid_loss < best_val:
            best_val = valid_loss
            best = params.copy()
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    report.wall_time_s = time.monotonic() - started
    return best, report


def _validation_auc(params: ModelParams, valid_data: Sequence[LabeledOutfit]) -> float:
    from .model import score_outfits

    scores = score_outfits(params, [items for items, _ in valid_data])
    labels = np.asarray([lbl for _, lbl in valid_data])
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    return evaluation.auc(pos, neg)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    vocab: Optional[Vocabulary]


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(
    params: ModelParams,
    train_config: TrainConfig,
    vocab: Optional[Vocabulary],
    path,
) -> None:
    """Versioned container: configs + vocabulary + tensors in declared order."""
    meta = {
        "model_config": _config_to_dict(params.config),
        "train_config": asdict(train_config),
        "vocab": vocab.tokens if vocab is not None else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    named = params.named_tensors()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<HBB", len(encoded), _DTYPE_CODES[t.data.dtype], t.data.ndim))
            f.write(encoded)
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path, expect_vse: Optional[bool] = None) -> Checkpoint:
    """Read a checkpoint back bit-exactly, validating every shape header.

    ``expect_vse`` lets a caller that needs (or cannot use) the
    text-augmented head reject a mismatched checkpoint up front.
    """
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sHHI")
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: magic {blob[:4]!r}")
    if len(blob) < head:
        raise CheckpointError("truncated header")
    _magic, version, _reserved, meta_len = struct.unpack("<4sHHI", blob[:head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = head
    if offset + meta_len > len(blob):
        raise CheckpointError("truncated metadata")
    meta = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    model_config = _config_from_dict(meta["model_config"])
    if expect_vse is not None and model_config.vse_enabled != expect_vse:
        want = "text-augmented" if expect_vse else "plain"
        have = "text-augmented" if model_config.vse_enabled else "plain"
        raise ConfigError(f"checkpoint holds a {have} model but a {want} one was requested")
    train_config = TrainConfig(**meta["train_config"])
    vocab = Vocabulary(meta["vocab"]) if meta["vocab"] is not None else None
    if offset + 4 > len(blob):
        raise CheckpointError("truncated tensor count")
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    expected = parameter_shapes(model_config)
    if n_tensors != len(expected):
        raise CheckpointError(f"checkpoint has {n_tensors} tensors, config expects {len(expected)}")
    tensors: dict[str, Tensor] = {}
    for exp_name, exp_shape in expected:
        if offset + 4 > len(blob):
            raise CheckpointError(f"truncated before tensor {exp_name!r}")
        name_len, dtype_code, ndim = struct.unpack_from("<HBB", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name != exp_name:
            raise CheckpointError(f"tensor order mismatch: found {name!r}, expected {exp_name!r}")
        if dtype_code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {dtype_code}")
        if offset + 4 * ndim > len(blob):
            raise CheckpointError(f"truncated shape header for tensor {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        if shape != exp_shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, config expects {exp_shape}"
            )
        dtype = _CODE_DTYPES[dtype_code]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        offset += nbytes
        tensors[name] = Tensor(data.reshape(shape).copy())
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes")
    return Checkpoint(ModelParams(model_config, tensors), train_config, vocab)


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["g_layers"] = list(config.g_layers)
    d["f_layers"] = list(config.f_layers)
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["g_layers"] = tuple(d["g_layers"])
    d["f_layers"] = tuple(d["f_layers"])
    return ModelConfig(**d)
