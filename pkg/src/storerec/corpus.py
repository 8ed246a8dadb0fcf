"""Synthetic catalog/user generator and the user-sequence TSV format."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .tokenizer import ItemRecord, write_catalog

TOPIC_NAMES = ("sports", "politics", "science", "travel", "music", "food", "health", "finance",
               "fashion", "gaming", "cinema", "weather")
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


@dataclass
class SyntheticSpec:
    n_items: int = 200
    n_topics: int = 4
    n_users: int = 1000
    coherence: float = 0.9
    groups_per_topic: int = 5
    chain_prob: float = 0.8
    topic_pool_size: int = 24
    group_pool_size: int = 8
    common_pool_size: int = 12
    title_len: int = 5
    abstract_len: int = 12
    min_history: int = 4
    max_history: int = 12
    seed: int = 7

    def validate(self):
        if self.n_topics < 2:
            raise ValidationError("n_topics must be >= 2")
        if self.n_topics > len(TOPIC_NAMES):
            raise ValidationError(f"at most {len(TOPIC_NAMES)} topics are supported")
        if not 0.5 < self.coherence <= 1.0:
            raise ValidationError("coherence must be in (0.5, 1]")
        if not 0.0 <= self.chain_prob <= 1.0:
            raise ValidationError("chain_prob must be in [0, 1]")
        if self.n_items < self.n_topics * self.groups_per_topic:
            raise ValidationError("need at least one item per topic group")
        if self.topic_pool_size + self.group_pool_size < self.title_len:
            raise ValidationError("vocabulary pool smaller than title length")
        if not 1 <= self.min_history <= self.max_history:
            raise ValidationError("need 1 <= min_history <= max_history")
        if self.n_users < 1:
            raise ValidationError("n_users must be positive")


@dataclass
class UserSequence:
    user_id: str
    history: list[str]
    target: str

    def __post_init__(self):
        if not self.history:
            raise ValidationError(f"user {self.user_id}: empty history")

    def capped(self, max_history: int) -> "UserSequence":
        return UserSequence(self.user_id, self.history[-max_history:], self.target)


@dataclass
class SyntheticCorpus:
    items: list[ItemRecord]
    sequences: list[UserSequence]
    topic_of: dict[str, int]
    group_of: dict[str, int]


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n_syll = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syll))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Items carry (title, abstract, category); category is the topic name.

    Item text mixes a shared pool, a per-topic pool and a per-group pool.
    A user's next item comes from their dominant topic with probability
    ``coherence`` (otherwise uniformly from the catalog); in-topic picks follow
    the group chain ``g -> g+1`` with probability ``chain_prob``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    taken = set(TOPIC_NAMES)
    common = _pseudo_words(rng, spec.common_pool_size, taken)
    topic_pool = [_pseudo_words(rng, spec.topic_pool_size, taken) for _ in range(spec.n_topics)]
    group_pool = [[_pseudo_words(rng, spec.group_pool_size, taken) for _ in range(spec.groups_per_topic)]
                  for _ in range(spec.n_topics)]

    topics = rng.integers(spec.n_topics, size=spec.n_items)
    groups = rng.integers(spec.groups_per_topic, size=spec.n_items)
    width = len(str(spec.n_items - 1))
    items, topic_of, group_of = [], {}, {}
    for j in range(spec.n_items):
        t, g = int(topics[j]), int(groups[j])
        iid = f"i{j:0{width}d}"

        def draw(n, shares):
            pools = [group_pool[t][g], topic_pool[t], common]
            which = rng.choice(3, size=n, p=shares)
            return " ".join(pools[w][rng.integers(len(pools[w]))] for w in which)

        title = draw(spec.title_len, [0.5, 0.4, 0.1])
        abstract = draw(spec.abstract_len, [0.35, 0.35, 0.3])
        items.append(ItemRecord(iid, [("title", title), ("abstract", abstract), ("category", TOPIC_NAMES[t])], 2))
        topic_of[iid], group_of[iid] = t, g

    members = {(t, g): [it.item_id for it in items if topic_of[it.item_id] == t and group_of[it.item_id] == g]
               for t in range(spec.n_topics) for g in range(spec.groups_per_topic)}
    by_topic = {t: [it.item_id for it in items if topic_of[it.item_id] == t] for t in range(spec.n_topics)}
    all_ids = [it.item_id for it in items]

    sequences = []
    uwidth = len(str(spec.n_users - 1))
    for u in range(spec.n_users):
        t = int(rng.integers(spec.n_topics))
        while not by_topic[t]:
            t = int(rng.integers(spec.n_topics))
        length = int(rng.integers(spec.min_history, spec.max_history + 1)) + 1
        first = by_topic[t][rng.integers(len(by_topic[t]))]
        seq, anchor = [first], group_of[first]
        while len(seq) < length:
            if rng.random() < spec.coherence:
                nxt_group = (anchor + 1) % spec.groups_per_topic
                pool = members[(t, nxt_group)] if rng.random() < spec.chain_prob else by_topic[t]
                if not pool:
                    pool = by_topic[t]
                nxt = pool[rng.integers(len(pool))]
                anchor = group_of[nxt]
            else:
                nxt = all_ids[rng.integers(len(all_ids))]
            seq.append(nxt)
        sequences.append(UserSequence(f"u{u:0{uwidth}d}", seq[:-1], seq[-1]))
    return SyntheticCorpus(items, sequences, topic_of, group_of)


def write_sequences(path: str | Path, sequences: Iterable[UserSequence]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for s in sequences:
            fh.write(f"{s.user_id}\t{','.join(s.history)}\t{s.target}\n")


def read_sequences(path: str | Path) -> list[UserSequence]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated fields")
            history = [h for h in row[1].split(",") if h]
            out.append(UserSequence(row[0], history, row[2]))
    return out


def write_corpus(corpus: SyntheticCorpus, items_path: str | Path, sequences_path: str | Path):
    write_catalog(items_path, corpus.items)
    write_sequences(sequences_path, corpus.sequences)


def split_users(sequences: Sequence[UserSequence], seed: int, val_frac: float = 0.1,
                test_frac: float = 0.1) -> tuple[list[UserSequence], list[UserSequence], list[UserSequence]]:
    """Deterministic user-level split into (train, validation, test)."""
    order = np.random.default_rng(seed).permutation(len(sequences))
    n_test = int(round(len(sequences) * test_frac))
    n_val = int(round(len(sequences) * val_frac))
    test = [sequences[i] for i in sorted(order[:n_test])]
    val = [sequences[i] for i in sorted(order[n_test: n_test + n_val])]
    train = [sequences[i] for i in sorted(order[n_test + n_val:])]
    return train, val, test
