"""Interaction datasets, chronological splits, prompt rendering, tokenization.

File formats:
  * interactions.tsv — header ``user_id\titem_id\trating\ttimestamp``; the
    rating column is binarized with rating > 3 -> 1 unless the whole column
    is already {0,1}, in which case values are taken as labels directly.
  * titles.tsv — header ``item_id\ttitle`` (UTF-8).
  * splits manifest — JSON with record indices per split and warm flags.

Prompt rendering is a pure function of (history titles, target title) and
reproduces one fixed template byte for byte. Tokenization is word-level:
word / punctuation-run / whitespace-run tokens, so "Yes" and "No" are single
tokens and encode-decode is the identity for in-vocabulary text.
"""

from __future__ import annotations

import dataclasses
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng


class DataError(RuntimeError):
    pass


class ParseError(DataError):
    pass


class MissingItemError(DataError):
    pass


class ConfigError(DataError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    label: int
    timestamp: int


@dataclass
class Catalog:
    """Item titles plus per-user chronological histories of liked items."""

    titles: dict[int, str]
    histories: dict[int, list[int]] = field(default_factory=dict)

    def title(self, item_id: int) -> str:
        try:
            return self.titles[item_id]
        except KeyError:
            raise MissingItemError(f"item {item_id} has no title") from None


@dataclass
class DatasetSplits:
    train: list[Interaction]
    valid: list[Interaction]
    test: list[Interaction]
    train_idx: list[int]
    valid_idx: list[int]
    test_idx: list[int]
    user_train_counts: Counter
    item_train_counts: Counter
    test_warm: list[bool] | None = None

    def manifest(self) -> dict:
        out = {"train": self.train_idx, "valid": self.valid_idx, "test": self.test_idx}
        if self.test_warm is not None:
            out["warm"] = self.test_warm
        return out


@dataclass
class PromptSample:
    user_id: int
    item_id: int
    prompt: str
    label: int
    token_ids: list[int]


# -- loading / writing ---------------------------------------------------------


def _parse_num(text: str, path: str, lineno: int, kind) -> float | int:
    try:
        return kind(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: cannot parse {text!r}") from None


def load_interactions(data_dir, rating_threshold: float = 3.0):
    """Read ``interactions.tsv`` + ``titles.tsv`` from a directory.

    Returns (interactions, catalog). Histories hold each user's liked
    (label 1) items in timestamp order.
    """
    data_dir = Path(data_dir)
    inter_path = data_dir / "interactions.tsv"
    titles_path = data_dir / "titles.tsv"
    for p in (inter_path, titles_path):
        if not p.exists():
            raise DataError(f"missing data file: {p}")

    titles: dict[int, str] = {}
    lines = titles_path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{titles_path}:{lineno}: expected 2 fields, got {len(parts)}")
        item_id = _parse_num(parts[0], str(titles_path), lineno, int)
        titles[int(item_id)] = parts[1]

    rows: list[tuple[int, int, float, int]] = []
    lines = inter_path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"{inter_path}:{lineno}: expected 4 fields, got {len(parts)}")
        u = int(_parse_num(parts[0], str(inter_path), lineno, int))
        i = int(_parse_num(parts[1], str(inter_path), lineno, int))
        r = float(_parse_num(parts[2], str(inter_path), lineno, float))
        t = int(_parse_num(parts[3], str(inter_path), lineno, int))
        if i not in titles:
            raise MissingItemError(f"{inter_path}:{lineno}: item {i} not in titles file")
        rows.append((u, i, r, t))

    already_binary = all(r in (0.0, 1.0) for _, _, r, _ in rows)
    interactions = [
        Interaction(u, i, int(r) if already_binary else int(r > rating_threshold), t)
        for u, i, r, t in rows
    ]
    catalog = Catalog(titles=titles, histories=build_histories(interactions))
    return interactions, catalog


def write_interactions(data_dir, interactions: list[Interaction], titles: dict[int, str]) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with open(data_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\trating\ttimestamp\n")
        for rec in interactions:
            fh.write(f"{rec.user_id}\t{rec.item_id}\t{rec.label}\t{rec.timestamp}\n")
    with open(data_dir / "titles.tsv", "w", encoding="utf-8") as fh:
        fh.write("item_id\ttitle\n")
        for item_id in sorted(titles):
            fh.write(f"{item_id}\t{titles[item_id]}\n")


def build_histories(interactions: list[Interaction]) -> dict[int, list[int]]:
    """Liked items per user, timestamp ascending."""
    per_user: dict[int, list[tuple[int, int]]] = {}
    for rec in interactions:
        if rec.label == 1:
            per_user.setdefault(rec.user_id, []).append((rec.timestamp, rec.item_id))
    return {u: [i for _, i in sorted(pairs)] for u, pairs in per_user.items()}


# -- splits ---------------------------------------------------------------------


def build_splits(interactions: list[Interaction], valid_frac: float, test_frac: float) -> DatasetSplits:
    """Global chronological split: earliest records train, then valid, then test.

    Ties on timestamp break by (user_id, item_id). Interaction counts are
    computed on the train portion only.
    """
    if not (0.0 < valid_frac < 1.0 and 0.0 < test_frac < 1.0 and valid_frac + test_frac < 1.0):
        raise ConfigError(f"bad split fractions {valid_frac}/{test_frac}")
    n = len(interactions)
    n_valid = int(n * valid_frac)
    n_test = int(n * test_frac)
    n_train = n - n_valid - n_test
    if n_train <= 0 or n_valid <= 0 or n_test <= 0:
        raise ConfigError(f"{n} interactions cannot populate train/valid/test")

    order = sorted(range(n), key=lambda j: (interactions[j].timestamp,
                                            interactions[j].user_id,
                                            interactions[j].item_id))
    train_idx = order[:n_train]
    valid_idx = order[n_train:n_train + n_valid]
    test_idx = order[n_train + n_valid:]

    user_counts: Counter = Counter()
    item_counts: Counter = Counter()
    for j in train_idx:
        user_counts[interactions[j].user_id] += 1
        item_counts[interactions[j].item_id] += 1

    return DatasetSplits(
        train=[interactions[j] for j in train_idx],
        valid=[interactions[j] for j in valid_idx],
        test=[interactions[j] for j in test_idx],
        train_idx=train_idx,
        valid_idx=valid_idx,
        test_idx=test_idx,
        user_train_counts=user_counts,
        item_train_counts=item_counts,
    )


def mark_warm_cold(splits: DatasetSplits, threshold: int) -> DatasetSplits:
    """Flag each test record warm iff both its user and item have at least
    ``threshold`` train interactions."""
    flags = [
        splits.user_train_counts[rec.user_id] >= threshold
        and splits.item_train_counts[rec.item_id] >= threshold
        for rec in splits.test
    ]
    return dataclasses.replace(splits, test_warm=flags)


# -- prompts ----------------------------------------------------------------------

PROMPT_TEMPLATE = (
    "#Question: A user has given high ratings to the following movies: "
    "{titles}. Leverage the information to predict whether the user would "
    'enjoy the movie titled {target}? Answer with "Yes" or "No". \n#Answer:'
)


def build_prompt(history_titles: list[str], target_title: str, max_history: int = 10) -> str:
    """Render the Yes/No question for one (history, target) pair.

    Only the ``max_history`` most recent titles appear; an empty history
    renders the list as "none".
    """
    recent = history_titles[-max_history:] if max_history > 0 else []
    titles = ",".join(recent) if recent else "none"
    return PROMPT_TEMPLATE.format(titles=titles, target=target_title)


# -- tokenization -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+|\s+")

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
YES_TOKEN = "Yes"
NO_TOKEN = "No"


def split_tokens(text: str) -> list[str]:
    """Word / punctuation-run / whitespace-run segmentation; lossless."""
    return _TOKEN_RE.findall(text)


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def yes_id(self) -> int:
        return self.token_to_id[YES_TOKEN]

    @property
    def no_id(self) -> int:
        return self.token_to_id[NO_TOKEN]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(tok, unk) for tok in split_tokens(text)]

    def decode(self, ids) -> str:
        return "".join(self.id_to_token[int(i)] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token})

    @staticmethod
    def from_json(text: str) -> "Vocabulary":
        tokens = json.loads(text)["tokens"]
        return Vocabulary({t: j for j, t in enumerate(tokens)}, list(tokens))


def build_vocab(texts: list[str], extra_words: list[str] = ()) -> Vocabulary:
    """Vocabulary over a corpus plus reserved/auxiliary words, sorted for
    stability. "Yes" and "No" are always present as single tokens."""
    seen: set[str] = set()
    for text in texts:
        seen.update(split_tokens(text))
    seen.update(extra_words)
    seen.update([YES_TOKEN, NO_TOKEN])
    seen.discard(PAD_TOKEN)
    seen.discard(UNK_TOKEN)
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + sorted(seen)
    return Vocabulary({t: j for j, t in enumerate(id_to_token)}, id_to_token)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocabulary) -> str:
    return vocab.decode(ids)


# -- prompt assembly over a split ---------------------------------------------------


class PromptBuilder:
    """Render prompts for interaction records against a fixed train window.

    History = the user's liked train items (most recent ``history_len``),
    always excluding the target item. ``id_only`` swaps every title for an
    opaque per-item placeholder so the text channel carries no semantics.
    """

    def __init__(self, catalog: Catalog, train: list[Interaction],
                 history_len: int = 10, id_only: bool = False):
        self.catalog = catalog
        self.history_len = history_len
        self.id_only = id_only
        self._hist = build_histories(train)

    def _title(self, item_id: int) -> str:
        if self.id_only:
            return placeholder_title(item_id)
        return self.catalog.title(item_id)

    def prompt(self, user_id: int, item_id: int) -> str:
        hist = [i for i in self._hist.get(user_id, []) if i != item_id]
        return build_prompt([self._title(i) for i in hist], self._title(item_id),
                            max_history=self.history_len)

    def render(self, records: list[Interaction], vocab: Vocabulary | None) -> list[PromptSample]:
        out = []
        for rec in records:
            text = self.prompt(rec.user_id, rec.item_id)
            ids = vocab.encode(text) if vocab is not None else []
            out.append(PromptSample(rec.user_id, rec.item_id, text, rec.label, ids))
        return out


def placeholder_title(item_id: int) -> str:
    return f"obj{item_id}"


def placeholder_words(n_items: int) -> list[str]:
    return [placeholder_title(i) for i in range(n_items)]


# -- synthetic data -------------------------------------------------------------------

_CLUSTER_WORDS = [
    "noir", "saga", "comedy", "thriller", "opera", "western",
    "mystery", "fantasy", "biopic", "musical", "heist", "romance",
]


def _cluster_of(vec: np.ndarray) -> int:
    j = int(np.argmax(np.abs(vec)))
    return 2 * j + (1 if vec[j] > 0 else 0)


def gen_synthetic(n_users: int, n_items: int, latent_dim: int, density: float, seed: int):
    """Draw a rank-``latent_dim`` interaction dataset with informative titles.

    Labels are 1 iff the user-item latent dot product exceeds the median dot
    over the sampled pairs, so classes stay balanced. Titles name the item's
    dominant latent cluster (plus a unique id), so text carries a coarse,
    denoised version of the item factor. Timestamps are a random permutation,
    hence unique.

    Returns (interactions, catalog, latents) where latents is the
    (user_factors, item_factors) pair used to generate labels.
    """
    if latent_dim < 1:
        raise ConfigError("latent_dim must be >= 1")
    rng = Rng(seed)
    users = rng.normal((n_users, latent_dim))
    items = rng.normal((n_items, latent_dim))

    n_total = n_users * n_items
    n_pick = int(round(density * n_total))
    flat = rng.choice(n_total, n_pick) if n_pick else np.empty(0, dtype=np.intp)
    u_ids = flat // n_items
    i_ids = flat % n_items

    dots = (users[u_ids] * items[i_ids]).sum(axis=1) if n_pick else np.empty(0)
    median = float(np.median(dots)) if n_pick else 0.0
    labels = (dots > median).astype(int)
    timestamps = rng.permutation(n_pick) if n_pick else np.empty(0, dtype=np.intp)

    interactions = [
        Interaction(int(u), int(i), int(y), int(t))
        for u, i, y, t in zip(u_ids, i_ids, labels, timestamps)
    ]
    titles = {
        i: f"{_CLUSTER_WORDS[_cluster_of(items[i]) % len(_CLUSTER_WORDS)]} {i}"
        for i in range(n_items)
    }
    catalog = Catalog(titles=titles, histories=build_histories(interactions))
    return interactions, catalog, (users, items)
