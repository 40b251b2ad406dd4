"""Review records: ingestion, normalization, vocabularies, splits and a
synthetic generator with planted personalized aspects."""

from __future__ import annotations

import enum
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import rng as rng_mod

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

RECORD_KEYS = ("user_id", "item_id", "rating", "review", "aspects")

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_WS = re.compile(r"\s+")


class DatasetError(ValueError):
    """Raised for malformed or out-of-range dataset content."""


class DatasetFormat(str, enum.Enum):
    JSONL = "jsonl"


def normalize_aspect(term: str) -> str:
    """Lowercase, strip surrounding punctuation, collapse inner whitespace."""
    t = _WS.sub(" ", term.lower()).strip()
    t = t.strip(string.punctuation + " ")
    return _WS.sub(" ", t)


def words(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    item_id: str
    rating: float
    review: str
    aspects: tuple[str, ...]

    def __post_init__(self):
        if not (1.0 <= self.rating <= 5.0):
            raise DatasetError(f"rating {self.rating} outside [1, 5]")
        if not self.review.strip():
            raise DatasetError("empty review")
        if any(not a for a in self.aspects):
            raise DatasetError("empty aspect term after normalization")

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "rating": self.rating,
            "review": self.review,
            "aspects": list(self.aspects),
        }


@dataclass(frozen=True)
class Dataset:
    records: tuple[ReviewRecord, ...]
    provenance: str = "ingested"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.provenance)

    def users(self) -> list[str]:
        return sorted({r.user_id for r in self.records})

    def items(self) -> list[str]:
        return sorted({r.item_id for r in self.records})


def _parse_record(obj, lineno: int) -> ReviewRecord:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: expected a JSON object")
    unknown = set(obj) - set(RECORD_KEYS)
    if unknown:
        raise DatasetError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
    for key in RECORD_KEYS:
        if key not in obj:
            raise DatasetError(f"line {lineno}: missing field '{key}'")
    for key in ("user_id", "item_id", "review"):
        if not isinstance(obj[key], str):
            raise DatasetError(f"line {lineno}: field '{key}' must be a string")
    rating = obj["rating"]
    if isinstance(rating, bool) or not isinstance(rating, (int, float)):
        raise DatasetError(f"line {lineno}: field 'rating' must be a number")
    aspects = obj["aspects"]
    if not isinstance(aspects, list) or not all(isinstance(a, str) for a in aspects):
        raise DatasetError(f"line {lineno}: field 'aspects' must be an array of strings")
    if not aspects:
        raise DatasetError(f"line {lineno}: field 'aspects' is empty")
    if not (1.0 <= float(rating) <= 5.0):
        raise DatasetError(f"record {lineno - 1} (line {lineno}): rating {rating} outside [1, 5]")
    try:
        return ReviewRecord(
            user_id=obj["user_id"],
            item_id=obj["item_id"],
            rating=float(rating),
            review=obj["review"],
            aspects=tuple(normalize_aspect(a) for a in aspects),
        )
    except DatasetError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None


def load_dataset(path, expected_format: DatasetFormat | str = DatasetFormat.JSONL) -> Dataset:
    fmt = DatasetFormat(expected_format)
    if fmt is not DatasetFormat.JSONL:  # pragma: no cover - single format today
        raise DatasetError(f"unsupported format {fmt}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, lineno))
    return Dataset(tuple(records), "ingested")


def save_dataset(d: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in d.records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class DatasetStats:
    n_ratings: int
    n_users: int
    n_items: int

    @property
    def sparsity(self) -> float:
        return self.n_ratings / (self.n_users * self.n_items)

    @property
    def sparsity_pct(self) -> float:
        """Sparsity as a percentage, rounded to three decimals."""
        return round(100.0 * self.sparsity, 3)

    def __str__(self) -> str:
        return (
            f"ratings={self.n_ratings} users={self.n_users} items={self.n_items} "
            f"sparsity={self.sparsity_pct:.3f}%"
        )


def dataset_stats(d: Dataset) -> DatasetStats:
    if len(d) == 0:
        raise DatasetError("cannot compute statistics of an empty dataset")
    return DatasetStats(len(d), len(d.users()), len(d.items()))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    token_to_id: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)


def _ranked(counts: Counter, min_freq: int = 1) -> list[str]:
    kept = [t for t, c in counts.items() if c >= min_freq]
    return sorted(kept, key=lambda t: (-counts[t], t))


def build_vocab(train: Dataset, min_freq: int = 1) -> Vocabulary:
    if len(train) == 0:
        raise DatasetError("cannot build a vocabulary from an empty dataset")
    counts = Counter(w for r in train for w in words(r.review))
    return Vocabulary(SPECIAL_TOKENS + tuple(_ranked(counts, min_freq)))


@dataclass(frozen=True)
class AspectVocabulary:
    terms: tuple[str, ...]
    aspect_to_id: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "aspect_to_id", {t: i for i, t in enumerate(self.terms)})

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self.aspect_to_id

    def id(self, term: str) -> int:
        return self.aspect_to_id[term]


def build_aspect_vocab(train: Dataset) -> AspectVocabulary:
    counts = Counter(a for r in train for a in r.aspects)
    return AspectVocabulary(tuple(_ranked(counts)))


def tokenize(text: str, v: Vocabulary, max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [BOS] + [v.id(w) for w in words(text)] + [EOS]
    return ids[:max_len]


def split_dataset(d: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    n = len(d)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DatasetError(f"split of {n} records by {tuple(ratios)} leaves an empty part")
    order = rng_mod.stream(seed, rng_mod.SPLIT).permutation(n)
    return (
        d.subset(order[:n_train]),
        d.subset(order[n_train:n_train + n_val]),
        d.subset(order[n_train + n_val:]),
    )


# Synthetic corpus -----------------------------------------------------------

ASPECT_WORDS = (
    "location", "service", "price", "breakfast", "staff", "room", "view",
    "pool", "wifi", "parking", "bathroom", "bed", "noise", "coffee",
    "dessert", "portion", "music", "lighting", "plot", "acting", "soundtrack",
    "ending", "dialogue", "pacing", "family", "adventure", "villain",
    "cinematography", "sweetness", "cleanliness", "atmosphere", "decor",
    "menu", "queue", "checkin", "elevator", "balcony", "spa", "gym", "bar",
)



@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 50
    n_items: int = 40
    n_records: int = 4000
    vocab_size: int = 200
    aspect_pool_size: int = 30
    aspects_per_review: int = 3
    review_length: int = 12
    rating_noise_std: float = 0.1
    seed: int = 0
    profile_rank: int = 2
    profile_scale: float = 6.0
    distractors: int = 3
    polarity_weight: float = 0.4

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_records", "vocab_size",
                     "aspect_pool_size", "aspects_per_review", "review_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.aspects_per_review > self.aspect_pool_size:
            raise ValueError("aspects_per_review exceeds aspect_pool_size")
        if not 0 <= self.distractors <= self.aspect_pool_size - self.aspects_per_review:
            raise ValueError("distractors must fit in the aspect pool beside the sampled aspects")
        if self.profile_rank < 1:
            raise ValueError("profile_rank must be >= 1")
        if not 0.0 <= self.polarity_weight <= 1.0:
            raise ValueError("polarity_weight must lie in [0, 1]")
        if self.rating_noise_std < 0:
            raise ValueError("rating_noise_std must be >= 0")


def aspect_terms(pool_size: int) -> list[str]:
    return [ASPECT_WORDS[k] if k < len(ASPECT_WORDS) else f"aspect{k}" for k in range(pool_size)]


def filler_terms(vocab_size: int) -> list[str]:
    return [f"w{j}" for j in range(vocab_size)]


def synthetic_profiles(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """User preference and item salience over the aspect pool, plus per-aspect polarity, all in (0, 1).

    Aspects, users and items get standard-normal latent factors of width
    ``profile_rank`` (drawn in that order), then one uniform polarity per
    aspect. Preference is ``expit(scale * user . aspect / sqrt(rank))`` and
    salience likewise for items.
    """
    g = rng_mod.stream(spec.seed, rng_mod.GENERATOR, 0)
    r = spec.profile_rank
    q = g.standard_normal((spec.aspect_pool_size, r))
    pu = g.standard_normal((spec.n_users, r))
    si = g.standard_normal((spec.n_items, r))
    polarity = g.random(spec.aspect_pool_size)
    k = spec.profile_scale / np.sqrt(r)
    return expit(k * pu @ q.T), expit(k * si @ q.T), polarity


def _weighted_draw(g: np.random.Generator, weights: np.ndarray) -> int:
    cdf = np.cumsum(weights)
    return int(np.searchsorted(cdf / cdf[-1], g.random(), side="right"))


def synthetic_record(spec: SyntheticSpec, pref: np.ndarray, sal: np.ndarray, polarity: np.ndarray,
                     r: int) -> ReviewRecord:
    """Record ``r`` of the synthetic corpus, drawn from its own stream.

    Draw order: user, item, then ``aspects_per_review`` aspects without
    replacement (one uniform each, inverse-CDF over pref*salience with drawn
    aspects zeroed), ``distractors`` further pool terms uniformly without
    replacement from the rest (same inverse-CDF rule, flat weights), the
    filler word ids, one insertion slot per distractor then per aspect in draw
    order, and one standard normal for rating noise. Distractors are
    mentioned in the text but are not ground truth.

    The rating is ``1 + 4 * score`` plus noise, clamped to [1, 5], where score
    blends the mean polarity of the sampled aspects with their mean pref*salience.
    """
    g = rng_mod.stream(spec.seed, rng_mod.GENERATOR, 1, r)
    u = int(g.integers(spec.n_users))
    i = int(g.integers(spec.n_items))
    w = pref[u] * sal[i]
    chosen = []
    for _ in range(spec.aspects_per_review):
        a = _weighted_draw(g, w)
        chosen.append(a)
        w = w.copy()
        w[a] = 0.0
    flat = np.ones(spec.aspect_pool_size)
    flat[chosen] = 0.0
    others = []
    for _ in range(spec.distractors):
        a = _weighted_draw(g, flat)
        others.append(a)
        flat[a] = 0.0
    terms = aspect_terms(spec.aspect_pool_size)
    fill = filler_terms(spec.vocab_size)
    tokens = [fill[j] for j in g.integers(spec.vocab_size, size=spec.review_length)]
    for a in others + chosen:
        tokens.insert(int(g.integers(len(tokens) + 1)), terms[a])
    fit = float(np.mean([pref[u, a] * sal[i, a] for a in chosen]))
    score = spec.polarity_weight * float(np.mean(polarity[chosen])) + (1.0 - spec.polarity_weight) * fit
    rating = 1.0 + 4.0 * score + spec.rating_noise_std * float(g.standard_normal())
    rating = min(5.0, max(1.0, rating))
    return ReviewRecord(
        user_id=f"u{u}",
        item_id=f"i{i}",
        rating=rating,
        review=" ".join(tokens),
        aspects=tuple(terms[a] for a in chosen),
    )


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    pref, sal, polarity = synthetic_profiles(spec)
    records = tuple(synthetic_record(spec, pref, sal, polarity, r) for r in range(spec.n_records))
    return Dataset(records, "synthetic")
