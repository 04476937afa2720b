"""Stores and samplers: feature files, manifests, vocabulary, negatives,
splits, fill-in-the-blank queries, and the synthetic dataset generator.

File formats
------------
Feature file (binary, little-endian), magic ``FRNF``::

    "FRNF" | version u16 = 1 | reserved u16 = 0 | dim u32 | count u64
    then per record: id_len u16 | id UTF-8 | dim * f32

Manifest: JSON Lines, one outfit per line with fields ``outfit_id``,
``items`` (list of item ids), optional ``label`` (0/1, default 1),
optional parallel ``categories`` and ``descriptions`` lists, optional
``provenance``.

Vocabulary file: one token per line, index = line number.
"""

from __future__ import annotations

import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EngineError, InputError
from .model import ItemInput

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"FRNF"
FEATURE_VERSION = 1
DEFAULT_MAX_OUTFIT_SIZE = 12


class FeatureFileError(EngineError, ValueError):
    """Base class for feature-file format problems."""


class BadMagicError(FeatureFileError):
    pass


class UnsupportedVersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DuplicateItemIdError(FeatureFileError):
    pass


class ManifestError(EngineError, ValueError):
    pass


class SamplingError(EngineError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Records and stores
# ---------------------------------------------------------------------------


@dataclass
class ItemRecord:
    item_id: str
    x: np.ndarray
    category: Optional[str] = None
    description: Optional[list[str]] = None


@dataclass
class ItemMeta:
    category: Optional[str] = None
    tokens: Optional[list[str]] = None


class FeatureStore:
    """Immutable id -> float32 feature-vector store."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        self.ids = list(ids)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise FeatureFileError(
                f"store needs one row per id: {self.vectors.shape} vs {len(self.ids)} ids"
            )
        self._index = {item_id: i for i, item_id in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DuplicateItemIdError("duplicate item id in store")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self._index[item_id]]
        except KeyError:
            raise KeyError(f"item {item_id!r} not in feature store") from None


def write_features(records: Sequence[ItemRecord], path) -> None:
    """Write records in the FRNF binary format; round-trips bit-exactly."""
    seen = set()
    dim = 0
    for r in records:
        if r.item_id in seen:
            raise DuplicateItemIdError(f"duplicate item id {r.item_id!r}")
        seen.add(r.item_id)
    if records:
        dim = int(np.asarray(records[0].x).shape[0])
        for r in records:
            x = np.asarray(r.x)
            if x.shape != (dim,):
                raise FeatureFileError(
                    f"item {r.item_id!r} has dim {x.shape}, store dim is {dim}"
                )
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHIQ", FEATURE_MAGIC, FEATURE_VERSION, 0, dim, len(records)))
        for r in records:
            encoded = r.item_id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(np.asarray(r.x, dtype="<f4").tobytes())


def read_features(path) -> FeatureStore:
    """Read an FRNF file; raises a distinct error per corruption kind."""
    with open(path, "rb") as f:
        blob = f.read()
    header_size = struct.calcsize("<4sHHIQ")
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"not a feature file: magic {blob[:4]!r}")
    if len(blob) < header_size:
        raise TruncatedFileError("truncated header")
    magic, version, _reserved, dim, count = struct.unpack("<4sHHIQ", blob[:header_size])
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"unsupported feature-file version {version}")
    offset = header_size
    ids: list[str] = []
    seen: set[str] = set()
    vectors = np.empty((count, dim), dtype=np.float32)
    vec_bytes = dim * 4
    for i in range(count):
        if offset + 2 > len(blob):
            raise TruncatedFileError(f"truncated at record {i}: missing id length")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(blob):
            raise TruncatedFileError(f"truncated at record {i}")
        item_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if item_id in seen:
            raise DuplicateItemIdError(f"duplicate item id {item_id!r} at record {i}")
        seen.add(item_id)
        ids.append(item_id)
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(blob):
        raise FeatureFileError(f"{len(blob) - offset} trailing bytes after record {count - 1}")
    return FeatureStore(ids, vectors)


# ---------------------------------------------------------------------------
# Outfits and manifests
# ---------------------------------------------------------------------------

PROVENANCES = ("positive", "sampled-negative", "synthetic")


@dataclass
class Outfit:
    outfit_id: str
    item_ids: tuple[str, ...]
    label: int = 1
    provenance: str = "positive"

    def __post_init__(self):
        self.item_ids = tuple(self.item_ids)
        if len(self.item_ids) < 2:
            raise ManifestError(
                f"outfit {self.outfit_id!r} has {len(self.item_ids)} items; at least 2 required"
            )
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ManifestError(f"outfit {self.outfit_id!r} repeats an item id")
        if self.label not in (0, 1):
            raise ManifestError(f"outfit {self.outfit_id!r} label must be 0 or 1")
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"outfit {self.outfit_id!r} has unknown provenance {self.provenance!r}")


def load_manifest(
    path, max_size: int = DEFAULT_MAX_OUTFIT_SIZE
) -> tuple[list[Outfit], dict[str, ItemMeta]]:
    """Parse a JSONL manifest into outfits plus per-item metadata.

    Descriptions may be raw strings (tokenized here) or pre-tokenized
    lists. Metadata for an item seen in several outfits keeps the first
    occurrence.
    """
    outfits: list[Outfit] = []
    seen_ids: set[str] = set()
    meta: dict[str, ItemMeta] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object")
            try:
                outfit_id = obj["outfit_id"]
                item_ids = obj["items"]
            except KeyError as e:
                raise ManifestError(f"{path}:{lineno}: missing field {e}") from None
            if not isinstance(item_ids, list) or not all(isinstance(i, str) for i in item_ids):
                raise ManifestError(f"{path}:{lineno}: items must be a list of strings")
            if outfit_id in seen_ids:
                raise ManifestError(f"{path}:{lineno}: duplicate outfit_id {outfit_id!r}")
            seen_ids.add(outfit_id)
            label = int(obj.get("label", 1))
            provenance = obj.get("provenance") or ("positive" if label == 1 else "sampled-negative")
            if len(item_ids) > max_size:
                raise ManifestError(
                    f"{path}:{lineno}: outfit has {len(item_ids)} items, max is {max_size}"
                )
            try:
                outfit = Outfit(outfit_id, tuple(item_ids), label, provenance)
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            outfits.append(outfit)
            categories = obj.get("categories")
            descriptions = obj.get("descriptions")
            for key, value in (("categories", categories), ("descriptions", descriptions)):
                if value is not None and len(value) != len(item_ids):
                    raise ManifestError(
                        f"{path}:{lineno}: {key} must parallel items ({len(value)} vs {len(item_ids)})"
                    )
            for i, item_id in enumerate(item_ids):
                if item_id in meta:
                    continue
                category = categories[i] if categories else None
                tokens = None
                if descriptions:
                    desc = descriptions[i]
                    tokens = list(desc) if isinstance(desc, list) else tokenize(desc)
                if category is not None or tokens is not None:
                    meta[item_id] = ItemMeta(category=category, tokens=tokens)
    return outfits, meta


def write_manifest(
    outfits: Sequence[Outfit], meta: Mapping[str, ItemMeta], path
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for o in outfits:
            obj: dict = {"outfit_id": o.outfit_id, "items": list(o.item_ids), "label": o.label}
            if o.provenance != ("positive" if o.label == 1 else "sampled-negative"):
                obj["provenance"] = o.provenance
            cats = [meta[i].category if i in meta else None for i in o.item_ids]
            if any(c is not None for c in cats):
                obj["categories"] = cats
            descs = [meta[i].tokens if i in meta else None for i in o.item_ids]
            if any(d is not None for d in descs):
                obj["descriptions"] = [d if d is not None else [] for d in descs]
            f.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token -> index map; index order is the file line order."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("vocabulary contains a duplicate token")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        """Presence multi-hot: 1 where a token occurs, unknown tokens ignored."""
        d = np.zeros(len(self.tokens), dtype=np.float32)
        for tok in tokens:
            i = self.index.get(tok.lower())
            if i is not None:
                d[i] = 1.0
        return d

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocabulary(
    descriptions: Iterable[str], max_size: int = 5000, min_count: int = 2
) -> Vocabulary:
    """Top ``max_size`` tokens by frequency, ties broken lexicographically."""
    counts: Counter = Counter()
    for text in descriptions:
        counts.update(tokenize(text))
    eligible = [(tok, c) for tok, c in counts.items() if c >= min_count]
    eligible.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary([tok for tok, _ in eligible[:max_size]])


def encode_description(tokens: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    return vocab.encode(tokens)


# ---------------------------------------------------------------------------
# Negative sampling and splits
# ---------------------------------------------------------------------------


def sample_negatives(
    positives: Sequence[Outfit],
    pool: Sequence[Outfit],
    rng: np.random.Generator,
) -> list[Outfit]:
    """One artificial negative per positive, matching the positive's size.

    Each item of a negative is drawn from a distinct source outfit of
    the pool, so a negative never collapses onto a single curated set.
    """
    if len(pool) < 2:
        raise SamplingError(f"pool spans {len(pool)} outfits; need at least 2")
    negatives = []
    for positive in positives:
        k = len(positive.item_ids)
        if k > len(pool):
            raise SamplingError(
                f"cannot draw {k} items from distinct outfits: pool has {len(pool)}"
            )
        for _attempt in range(100):
            sources = rng.choice(len(pool), size=k, replace=False)
            item_ids = tuple(
                pool[s].item_ids[rng.integers(len(pool[s].item_ids))] for s in sources
            )
            if len(set(item_ids)) == k:
                break
        else:
            raise SamplingError(
                f"could not sample {k} distinct items for {positive.outfit_id!r}"
            )
        negatives.append(
            Outfit(
                outfit_id=f"{positive.outfit_id}~neg",
                item_ids=item_ids,
                label=0,
                provenance="sampled-negative",
            )
        )
    return negatives


def split_dataset(
    outfits: Sequence[Outfit],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> dict[str, list[Outfit]]:
    """Disjoint, exhaustive train/valid/test split, deterministic in the seed."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must be three non-negatives summing to 1: {ratios}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(outfits))
    n = len(outfits)
    b1 = int(n * ratios[0] + 0.5)
    b2 = int(n * (ratios[0] + ratios[1]) + 0.5)
    shuffled = [outfits[i] for i in order]
    return {
        "train": shuffled[:b1],
        "valid": shuffled[b1:b2],
        "test": shuffled[b2:],
    }


# ---------------------------------------------------------------------------
# Fill-in-the-blank queries
# ---------------------------------------------------------------------------


@dataclass
class FitbQuery:
    partial_items: tuple[str, ...]
    candidates: tuple[str, str, str, str]
    answer_index: int
    category: str
    outfit_id: str = ""

    def __post_init__(self):
        if len(self.candidates) != 4:
            raise InputError("a query carries exactly 4 candidates")
        if not 0 <= self.answer_index <= 3:
            raise InputError("answer_index must be in 0..3")


def build_fitb(
    positives: Sequence[Outfit],
    meta: Mapping[str, ItemMeta],
    rng: np.random.Generator,
    min_outfit_size: int = 3,
) -> list[FitbQuery]:
    """One hold-one-out query per eligible outfit.

    The held-out item is drawn at random; the three distractors are
    same-category items from other outfits, never items already in the
    partial outfit. Outfits that cannot field 4 distinct same-category
    candidates are skipped (logged), not errors.
    """

    def category_of(item_id: str) -> str:
        m = meta.get(item_id)
        if m is None or m.category is None:
            raise InputError(f"item {item_id!r} carries no category")
        return m.category

    # item -> outfits it appears in; category -> items in first-seen order
    outfits_of: dict[str, set[str]] = {}
    by_category: dict[str, list[str]] = {}
    for o in positives:
        for item_id in o.item_ids:
            if item_id not in outfits_of:
                by_category.setdefault(category_of(item_id), []).append(item_id)
                outfits_of[item_id] = set()
            outfits_of[item_id].add(o.outfit_id)

    queries: list[FitbQuery] = []
    n_skipped = 0
    for o in positives:
        if len(o.item_ids) < min_outfit_size:
            n_skipped += 1
            log.debug("fitb: %s skipped: size %d < %d", o.outfit_id, len(o.item_ids), min_outfit_size)
            continue
        held_pos = int(rng.integers(len(o.item_ids)))
        answer = o.item_ids[held_pos]
        partial = tuple(i for i in o.item_ids if i != answer)
        cat = category_of(answer)
        excluded = set(partial) | {answer}
        pool = [
            i
            for i in by_category.get(cat, [])
            if i not in excluded and outfits_of[i] - {o.outfit_id}
        ]
        if len(pool) < 3:
            n_skipped += 1
            log.debug(
                "fitb: %s skipped: category %r has %d eligible distractors",
                o.outfit_id, cat, len(pool),
            )
            continue
        picks = rng.choice(len(pool), size=3, replace=False)
        candidates = [pool[p] for p in picks]
        answer_index = int(rng.integers(4))
        candidates.insert(answer_index, answer)
        queries.append(
            FitbQuery(
                partial_items=partial,
                candidates=tuple(candidates),
                answer_index=answer_index,
                category=cat,
                outfit_id=o.outfit_id,
            )
        )
    if n_skipped:
        log.info("fitb: skipped %d of %d outfits", n_skipped, len(positives))
    return queries


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_CATEGORY_WORDS = [
    "top", "bottom", "shoes", "bag", "hat", "jacket",
    "coat", "dress", "scarf", "belt", "watch", "ring",
]


@dataclass
class SyntheticConfig:
    n_styles: int = 8
    feature_dim: int = 32
    n_categories: int = 6
    sigma: float = 0.1
    min_outfit_size: int = 2
    max_outfit_size: int = 8
    n_train: int = 5000
    n_valid: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_styles, self.feature_dim, self.n_categories) <= 0:
            raise InputError("styles, feature_dim and categories must be positive")
        if self.sigma <= 0:
            raise InputError("sigma must be positive")
        if not 2 <= self.min_outfit_size <= self.max_outfit_size:
            raise InputError("outfit size range must satisfy 2 <= min <= max")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise InputError("split counts must be non-negative")


def category_word(index: int) -> str:
    if index < len(_CATEGORY_WORDS):
        return _CATEGORY_WORDS[index]
    return f"cat{index}"


@dataclass
class SyntheticData:
    records: list[ItemRecord]
    splits: dict[str, list[Outfit]]
    meta: dict[str, ItemMeta]
    item_styles: dict[str, int]
    centroids: np.ndarray  # (styles, categories, feature_dim)

    def store(self) -> FeatureStore:
        return FeatureStore(
            [r.item_id for r in self.records],
            np.asarray([r.x for r in self.records], dtype=np.float32),
        )


def gen_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Style-clustered stand-in dataset, deterministic in the seed.

    Every positive outfit commits to one style; each of its items is the
    (style, category) centroid plus Gaussian noise. Descriptions are two
    templated tokens naming the style and the category, which gives the
    text variant real signal. When an outfit is larger than the category
    count, categories repeat.
    """
    rng = np.random.default_rng(config.seed)
    centroids = rng.normal(0.0, 1.0, size=(config.n_styles, config.n_categories, config.feature_dim))
    records: list[ItemRecord] = []
    meta: dict[str, ItemMeta] = {}
    item_styles: dict[str, int] = {}
    splits: dict[str, list[Outfit]] = {}
    for split, count in (("train", config.n_train), ("valid", config.n_valid), ("test", config.n_test)):
        outfits = []
        for k in range(count):
            n = int(rng.integers(config.min_outfit_size, config.max_outfit_size + 1))
            style = int(rng.integers(config.n_styles))
            if n <= config.n_categories:
                cats = rng.choice(config.n_categories, size=n, replace=False)
            else:
                extra = rng.choice(config.n_categories, size=n - config.n_categories, replace=True)
                cats = np.concatenate([np.arange(config.n_categories), extra])
            item_ids = []
            for cat in cats:
                cat = int(cat)
                item_id = f"{split[:2]}{len(records):07d}s{style:02d}c{cat:02d}"
                x = centroids[style, cat] + rng.normal(0.0, config.sigma, size=config.feature_dim)
                records.append(ItemRecord(item_id, x.astype(np.float32)))
                meta[item_id] = ItemMeta(
                    category=category_word(cat),
                    tokens=[f"style{style}", category_word(cat)],
                )
                item_styles[item_id] = style
                item_ids.append(item_id)
            outfits.append(
                Outfit(
                    outfit_id=f"{split[:2]}-outfit-{k:07d}",
                    item_ids=tuple(item_ids),
                    label=1,
                    provenance="synthetic",
                )
            )
        splits[split] = outfits
    return SyntheticData(records, splits, meta, item_styles, centroids)


# ---------------------------------------------------------------------------
# Model-input materialization
# ---------------------------------------------------------------------------


def materialize_items(
    store: FeatureStore,
    meta: Mapping[str, ItemMeta],
    vocab: Optional[Vocabulary] = None,
) -> dict[str, ItemInput]:
    """Bind every stored item to the model's input form (encode text once)."""
    items: dict[str, ItemInput] = {}
    for item_id in store.ids:
        d = None
        if vocab is not None:
            m = meta.get(item_id)
            d = vocab.encode(m.tokens) if m and m.tokens else np.zeros(len(vocab), dtype=np.float32)
        items[item_id] = ItemInput(item_id=item_id, x=store.get(item_id), d=d)
    return items


def labeled_outfits(
    outfits: Sequence[Outfit], items: Mapping[str, ItemInput]
) -> list[tuple[list[ItemInput], int]]:
    """Resolve outfits to (item inputs, label) pairs for training/evaluation."""
    resolved = []
    for o in outfits:
        try:
            resolved.append(([items[i] for i in o.item_ids], o.label))
        except KeyError as e:
            raise InputError(f"outfit {o.outfit_id!r} references unknown item {e}") from None
    return resolved
