"""Relational scorer over item sets.

Each item's feature vector is projected to a compact embedding; every
unordered item pair is concatenated in a canonical order and run through
the relation MLP g; the pair embeddings are mean-pooled and scored by
the MLP f plus a 2-way classifier head. Scoring is exactly permutation
invariant because pair construction sorts items by id first.

The text-augmented variant projects a multi-hot description vector per
item and concatenates it with the visual embedding before pairing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as af
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; parameter shapes derive from these."""

    feature_dim: int
    projection_dim: int = 1000
    g_layers: tuple[int, ...] = (512, 512, 256, 256)
    f_layers: tuple[int, ...] = (128, 128, 32)
    dropout_rate: float = 0.35
    vse_enabled: bool = False
    vocab_size: int = 0
    text_projection_dim: int = 300
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "g_layers", tuple(self.g_layers))
        object.__setattr__(self, "f_layers", tuple(self.f_layers))
        dims = (self.feature_dim, self.projection_dim) + self.g_layers + self.f_layers
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all dimensions must be positive: {dims}")
        if not self.g_layers or not self.f_layers:
            raise ConfigError("g_layers and f_layers must be non-empty")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1): {self.dropout_rate}")
        if self.vse_enabled:
            if self.vocab_size <= 0 or self.text_projection_dim <= 0:
                raise ConfigError("text-augmented config needs vocab_size and text_projection_dim > 0")

    @property
    def item_embed_dim(self) -> int:
        """Per-item width entering pair construction."""
        if self.vse_enabled:
            return self.projection_dim + self.text_projection_dim
        return self.projection_dim

    @property
    def pair_input_dim(self) -> int:
        return 2 * self.item_embed_dim


@dataclass
class ItemInput:
    """One item as the model sees it: id, feature vector, optional multi-hot text."""

    item_id: str
    x: np.ndarray
    d: Optional[np.ndarray] = None


@dataclass
class CompatibilityScore:
    """Output of scoring one outfit. ``m_s`` is probs[1], the compatible-class probability."""

    m_s: float
    logits: np.ndarray
    probs: np.ndarray
    n_pairs: int


class ModelParams:
    """All learnable parameters, as named tensors in a fixed declared order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        expected = [name for name, _ in parameter_shapes(config)]
        if list(tensors.keys()) != expected:
            raise ConfigError(f"parameter names {list(tensors)} do not match config {expected}")
        for name, shape in parameter_shapes(config):
            if tensors[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {tensors[name].shape}, expected {shape}"
                )
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {n: Tensor(t.data.copy()) for n, t in self._tensors.items()}
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {n: Tensor(t.data.astype(dtype)) for n, t in self._tensors.items()}
        )

    def grads_by_name(self, raw: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Map a backward() result onto parameter names, zero-filling misses."""
        out = {}
        for name, t in self._tensors.items():
            g = raw.get(id(t))
            out[name] = np.zeros_like(t.data) if g is None else g
        return out


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; the checkpoint format follows it."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("proj.w", (config.feature_dim, config.projection_dim)),
        ("proj.b", (config.projection_dim,)),
    ]
    if config.vse_enabled:
        shapes += [
            ("text.w", (config.vocab_size, config.text_projection_dim)),
            ("text.b", (config.text_projection_dim,)),
        ]
    in_dim = config.pair_input_dim
    for i, width in enumerate(config.g_layers):
        shapes += _layer_shapes(f"g{i}", in_dim, width)
        in_dim = width
    for i, width in enumerate(config.f_layers):
        shapes += _layer_shapes(f"f{i}", in_dim, width)
        in_dim = width
    shapes += [("cls.w", (in_dim, 2)), ("cls.b", (2,))]
    return shapes


def _layer_shapes(prefix: str, in_dim: int, out_dim: int):
    return [
        (f"{prefix}.w", (in_dim, out_dim)),
        (f"{prefix}.b", (out_dim,)),
        (f"{prefix}.ln_g", (out_dim,)),
        (f"{prefix}.ln_b", (out_dim,)),
    ]


def init_params(
    config: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".w"):
            fan_in, fan_out = shape
            s = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-s, s, size=shape)
        elif name.endswith(".ln_g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(np.asarray(data, dtype=dtype))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------


def build_pairs(
    items: Sequence[ItemInput], canonical: bool = True
) -> list[tuple[ItemInput, ItemInput]]:
    """All C(n, 2) unordered item pairs, each ordered by ascending item id.

    With ``canonical`` (the default) the pair list is identical for any
    permutation of the input, which is what makes set scoring exactly
    permutation invariant.
    """
    if len(items) < 2:
        raise InputError(f"need at least 2 items to build pairs, got {len(items)}")
    ordered = sorted(items, key=lambda it: it.item_id) if canonical else list(items)
    return [
        (ordered[i], ordered[j])
        for i in range(len(ordered))
        for j in range(i + 1, len(ordered))
    ]


def _pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    left, right = zip(*[(i, j) for i in range(n) for j in range(i + 1, n)])
    return np.asarray(left, dtype=np.intp), np.asarray(right, dtype=np.intp)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _mlp(
    params: ModelParams,
    prefix: str,
    n_layers: int,
    x: Tensor,
    mode: str,
    rng: Optional[np.random.Generator],
    skip_dropout_last: bool,
) -> Tensor:
    # Layer recipe: linear -> layer_norm -> relu -> dropout.
    cfg = params.config
    training = mode == "train"
    for i in range(n_layers):
        p = f"{prefix}{i}"
        x = af.add_bias(af.matmul(x, params[f"{p}.w"]), params[f"{p}.b"])
        x = af.layer_norm(x, params[f"{p}.ln_g"], params[f"{p}.ln_b"], cfg.layer_norm_eps)
        x = af.relu(x)
        last = i == n_layers - 1
        if not (skip_dropout_last and last):
            x = af.dropout(x, cfg.dropout_rate, rng, training)
    return x


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")


def _stack_item_matrix(params: ModelParams, items: Sequence[ItemInput]) -> Tensor:
    cfg = params.config
    rows = []
    for it in items:
        x = np.asarray(it.x)
        if x.shape != (cfg.feature_dim,):
            raise InputError(
                f"item {it.item_id!r}: feature shape {x.shape} != ({cfg.feature_dim},)"
            )
        rows.append(x)
    return Tensor(np.asarray(rows, dtype=params.dtype))


def _stack_text_matrix(params: ModelParams, items: Sequence[ItemInput]) -> Tensor:
    cfg = params.config
    rows = []
    for it in items:
        if it.d is None:
            raise InputError(f"item {it.item_id!r} has no description vector")
        d = np.asarray(it.d)
        if d.shape != (cfg.vocab_size,):
            raise InputError(
                f"item {it.item_id!r}: description shape {d.shape} != ({cfg.vocab_size},)"
            )
        rows.append(d)
    return Tensor(np.asarray(rows, dtype=params.dtype))


def _embed_items(
    params: ModelParams, items: Sequence[ItemInput]
) -> Tensor:
    """Project stacked features (and text, when enabled) to per-item rows."""
    v = af.add_bias(af.matmul(_stack_item_matrix(params, items), params["proj.w"]), params["proj.b"])
    if params.config.vse_enabled:
        t = af.add_bias(
            af.matmul(_stack_text_matrix(params, items), params["text.w"]), params["text.b"]
        )
        v = af.concat_cols(v, t)
    return v


def forward_logits(
    params: ModelParams,
    outfits: Sequence[Sequence[ItemInput]],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, int]:
    """Logit rows for a group of same-size outfits, one row per outfit.

    Items of each outfit are sorted by id before stacking, so the result
    depends only on the item sets. Returns (logits (b, 2), pairs per
    outfit). All outfits in the group must have the same size.
    """
    _check_mode(mode)
    if not outfits:
        raise InputError("forward_logits needs at least one outfit")
    sizes = {len(o) for o in outfits}
    if len(sizes) != 1:
        raise InputError(f"forward_logits needs same-size outfits, got sizes {sorted(sizes)}")
    n = sizes.pop()
    if n < 2:
        raise InputError(f"an outfit needs at least 2 items, got {n}")
    cfg = params.config
    b = len(outfits)
    items: list[ItemInput] = []
    for o in outfits:
        ordered = sorted(o, key=lambda it: it.item_id)
        if len({it.item_id for it in ordered}) != n:
            raise InputError("duplicate item ids within an outfit")
        items.extend(ordered)
    v = _embed_items(params, items)
    left, right = _pair_indices(n)
    m = len(left)
    all_left = np.concatenate([left + k * n for k in range(b)])
    all_right = np.concatenate([right + k * n for k in range(b)])
    pairs = af.gather_pairs(v, all_left, all_right)
    h = _mlp(params, "g", len(cfg.g_layers), pairs, mode, rng, skip_dropout_last=False)
    pooled = af.mean_pool_rows(h, m)
    z = _mlp(params, "f", len(cfg.f_layers), pooled, mode, rng, skip_dropout_last=True)
    logits = af.add_bias(af.matmul(z, params["cls.w"]), params["cls.b"])
    return logits, m


def _probs_from_logit_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def score_outfit(
    params: ModelParams,
    items: Sequence[ItemInput],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> CompatibilityScore:
    """Compatibility score of one item set; a pure function in eval mode."""
    if params.config.vse_enabled:
        return score_outfit_vse(params, items, mode, rng)
    logits, m = forward_logits(params, [items], mode, rng)
    row = logits.data[0]
    probs = _probs_from_logit_rows(row[None, :])[0]
    return CompatibilityScore(m_s=float(probs[1]), logits=row.copy(), probs=probs, n_pairs=m)


def score_outfit_vse(
    params: ModelParams,
    items: Sequence[ItemInput],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> CompatibilityScore:
    """Text-augmented variant; every item must carry a description vector."""
    if not params.config.vse_enabled:
        raise ConfigError("params were built without text augmentation")
    logits, m = forward_logits(params, [items], mode, rng)
    row = logits.data[0]
    probs = _probs_from_logit_rows(row[None, :])[0]
    return CompatibilityScore(m_s=float(probs[1]), logits=row.copy(), probs=probs, n_pairs=m)


def score_outfits(
    params: ModelParams, outfits: Sequence[Sequence[ItemInput]]
) -> np.ndarray:
    """Eval-mode compatible-class probabilities for many outfits at once.

    Outfits are grouped by size so each group runs as one batched
    forward; results come back in input order.
    """
    scores = np.empty(len(outfits), dtype=np.float64)
    by_size: dict[int, list[int]] = {}
    for i, o in enumerate(outfits):
        by_size.setdefault(len(o), []).append(i)
    for n in sorted(by_size):
        idx = by_size[n]
        logits, _ = forward_logits(params, [outfits[i] for i in idx], mode="eval")
        probs = _probs_from_logit_rows(logits.data)
        for row, i in enumerate(idx):
            scores[i] = probs[row, 1]
    return scores


def relation(
    params: ModelParams,
    pair: np.ndarray,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Relation embedding of one concatenated pair vector."""
    _check_mode(mode)
    cfg = params.config
    pair = np.asarray(pair, dtype=params.dtype)
    if pair.shape != (cfg.pair_input_dim,):
        raise InputError(f"pair shape {pair.shape} != ({cfg.pair_input_dim},)")
    h = _mlp(params, "g", len(cfg.g_layers), Tensor(pair[None, :]), mode, rng, skip_dropout_last=False)
    return h.data[0].copy()


def embed_item(params: ModelParams, item: ItemInput) -> np.ndarray:
    """The item's compatibility embedding: the linear projection of x."""
    cfg = params.config
    x = np.asarray(item.x, dtype=params.dtype)
    if x.shape != (cfg.feature_dim,):
        raise InputError(f"item {item.item_id!r}: feature shape {x.shape} != ({cfg.feature_dim},)")
    return x @ params["proj.w"].data + params["proj.b"].data
