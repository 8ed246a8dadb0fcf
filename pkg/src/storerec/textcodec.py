"""Word-level vocabulary with registered special tokens."""
from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ValidationError

VOCAB_VERSION = 1

PAD, UNK, EOS, SEP, YES, NO = "<pad>", "<unk>", "<eos>", "<sep>", "<yes>", "<no>"
CONTROL_TOKENS = (PAD, UNK, EOS, SEP, YES, NO)

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class SpecialKind(str, enum.Enum):
    DENSE = "DENSE"
    PLACEHOLDER = "PLACEHOLDER"
    TASK = "TASK"
    CODE = "CODE"
    CONTROL = "CONTROL"


class BlockTag(str, enum.Enum):
    CONTENT = "CONTENT"
    TOKEN = "TOKEN"
    PLACEHOLDER = "PLACEHOLDER"
    TASK = "TASK"


class VocabError(ValidationError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and peel punctuation into its own tokens."""
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


def dense_token(i: int) -> str:
    return f"<DT{i}>"


def placeholder_token(i: int) -> str:
    return f"<PH{i}>"


def task_token(name: str) -> str:
    return f"<{name}>"


def code_token(pos: int, idx: int) -> str:
    return f"<C{pos}_{idx}>"


@dataclass
class TokenSequence:
    ids: list[int]
    tags: list[BlockTag] = field(default_factory=list)

    def __post_init__(self):
        if not self.tags:
            self.tags = [BlockTag.CONTENT] * len(self.ids)
        if len(self.tags) != len(self.ids):
            raise ValidationError("TokenSequence ids/tags length mismatch")

    def __len__(self):
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids, self.tags + other.tags)

    def retag(self, tag: BlockTag) -> "TokenSequence":
        return TokenSequence(list(self.ids), [tag] * len(self.ids))

    def span(self, tag: BlockTag) -> tuple[int, int]:
        """Half-open range covered by ``tag`` (assumes it is one contiguous run)."""
        pos = [i for i, t in enumerate(self.tags) if t == tag]
        if not pos:
            return (0, 0)
        return (pos[0], pos[-1] + 1)


class Vocabulary:
    """Bijective token/id map.  Control tokens take ids 0..5, then words, then
    registered specials; registering specials freezes the vocabulary."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        self.kinds: dict[str, SpecialKind] = {}
        self.frozen = False
        for tok in CONTROL_TOKENS:
            self._add(tok, SpecialKind.CONTROL)
        for w in words:
            self._add(w)

    def _add(self, token: str, kind: SpecialKind | None = None) -> int:
        if token in self.stoi:
            raise VocabError(f"duplicate token {token!r}")
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        if kind is not None:
            self.kinds[token] = kind
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def special_id(self, token: str) -> int:
        if token not in self.kinds:
            raise VocabError(f"unknown special token {token!r}")
        return self.stoi[token]

    def ids_of_kind(self, kind: SpecialKind) -> list[int]:
        return [self.stoi[t] for t, k in self.kinds.items() if k == kind]

    @property
    def word_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.itos) if t not in self.kinds]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def code_id(self, pos: int, idx: int) -> int:
        return self.special_id(code_token(pos, idx))

    def task_names(self) -> list[str]:
        return [t[1:-1] for t, k in self.kinds.items() if k == SpecialKind.TASK]

    # -- encode / decode --

    def encode(self, text: str) -> TokenSequence:
        if not self.frozen:
            raise VocabError("encode requires a frozen vocabulary")
        return TokenSequence([self.id(w) for w in tokenize(text)])

    def decode(self, seq: TokenSequence | Iterable[int]) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
        out = []
        for i in ids:
            if not 0 <= i < len(self.itos):
                raise VocabError(f"unknown token id {i}")
            out.append(self.itos[i])
        return " ".join(out)

    # -- persistence --

    def to_json(self) -> dict:
        return {
            "version": VOCAB_VERSION,
            "words": [t for t in self.itos if t not in self.kinds],
            "specials": {t: {"id": self.stoi[t], "kind": k.value} for t, k in self.kinds.items()},
            "frozen": self.frozen,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_VERSION:
            raise VocabError(f"unsupported vocabulary version {obj.get('version')!r}")
        size = len(obj["words"]) + len(obj["specials"])
        slots: list[tuple[str, SpecialKind | None] | None] = [None] * size
        for tok, info in obj["specials"].items():
            slots[info["id"]] = (tok, SpecialKind(info["kind"]))
        words = iter(obj["words"])
        vocab = cls.__new__(cls)
        vocab.itos, vocab.stoi, vocab.kinds, vocab.frozen = [], {}, {}, False
        for slot in slots:
            tok, kind = slot if slot is not None else (next(words), None)
            vocab._add(tok, kind)
        vocab.frozen = bool(obj.get("frozen", True))
        return vocab

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Words by descending frequency (ties lexicographic); ``max_size`` counts the control tokens."""
    counts: Counter[str] = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(tokenize(text))
    if not seen:
        raise VocabError("empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_count and w not in CONTROL_TOKENS),
                   key=lambda w: (-counts[w], w))
    if max_size is not None:
        words = words[: max(0, max_size - len(CONTROL_TOKENS))]
    return Vocabulary(words)


def register_specials(vocab: Vocabulary, v: int, task_names: list[str], k: int) -> Vocabulary:
    """Append v dense tokens, v placeholders, one token per task and v*k codes; freeze."""
    if vocab.frozen:
        raise VocabError("vocabulary is frozen; specials already registered")
    if len(set(task_names)) != len(task_names):
        raise VocabError("duplicate task names")
    for i in range(1, v + 1):
        vocab._add(dense_token(i), SpecialKind.DENSE)
    for i in range(1, v + 1):
        vocab._add(placeholder_token(i), SpecialKind.PLACEHOLDER)
    for name in task_names:
        vocab._add(task_token(name), SpecialKind.TASK)
    for pos in range(1, v + 1):
        for idx in range(1, k + 1):
            vocab._add(code_token(pos, idx), SpecialKind.CODE)
    vocab.frozen = True
    return vocab
