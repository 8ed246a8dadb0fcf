"""Generative recommendation over semantic codes.

Users become flattened code sequences, the backbone learns next-code
prediction (plus code/text alignment and yes/no scoring prompts), and
inference walks a trie of the catalog's codes so every result is a real item.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numeric as nm
from .backbone import Backbone, FreezePolicy, causal_mask
from .clusterer import CodeMatrix
from .corpus import UserSequence
from .errors import ValidationError
from .metrics import RetrievalResult, recall_at_k
from .textcodec import NO, SEP, YES, SpecialKind, Vocabulary, task_token
from .tokenizer import ItemRecord, _batches, run_epochs

log = logging.getLogger(__name__)

REC_TASK, ALIGN_TASK, SCORE_TASK = "rec", "align", "score"
REC_TASKS = (REC_TASK, ALIGN_TASK, SCORE_TASK)


class SampleKind(str, enum.Enum):
    RETRIEVAL = "retrieval"
    ALIGNMENT = "alignment"
    SCORING = "scoring"


class UnknownItemError(ValidationError):
    pass


# -- code tree ---------------------------------------------------------------


class CodeTree:
    """Trie over semantic ids; leaves hold the item id."""

    def __init__(self, columns: Sequence[tuple[int, ...]], item_ids: Sequence[str]):
        if not columns:
            raise ValidationError("cannot build a code tree without items")
        self.depth = len(columns[0])
        self.root: dict = {}
        self.items: dict[tuple[int, ...], str] = {}
        for col, iid in zip(columns, item_ids):
            col = tuple(int(c) for c in col)
            if len(col) != self.depth:
                raise ValidationError("semantic ids differ in length")
            if col in self.items:
                raise ValidationError(f"duplicate semantic id {col} ({self.items[col]}, {iid}); resolve collisions first")
            node = self.root
            for c in col:
                node = node.setdefault(c, {})
            self.items[col] = iid

    @classmethod
    def from_codes(cls, codes: CodeMatrix) -> "CodeTree":
        return cls(codes.columns(), codes.item_ids)

    def __len__(self):
        return len(self.items)

    def __contains__(self, col) -> bool:
        return tuple(col) in self.items

    def node(self, prefix: Sequence[int]) -> dict | None:
        node = self.root
        for c in prefix:
            node = node.get(c)
            if node is None:
                return None
        return node

    def children(self, prefix: Sequence[int]) -> list[int]:
        node = self.node(prefix)
        return sorted(node) if node is not None else []

    def item(self, col: Sequence[int]) -> str | None:
        return self.items.get(tuple(col))


# -- samples -----------------------------------------------------------------


@dataclass
class RecSample:
    kind: SampleKind
    ids: list[int]
    loss: list[bool]  # position j is scored on predicting ids[j + 1]
    label: object = None

    def __post_init__(self):
        if len(self.ids) != len(self.loss):
            raise ValidationError("sample ids/loss length mismatch")


class Prompter:
    """Builds instruction sequences for one vocabulary and code matrix."""

    def __init__(self, vocab: Vocabulary, codes: CodeMatrix, max_history: int = 10):
        self.vocab = vocab
        self.codes = codes
        self.max_history = max_history
        self.index = codes.index
        self.task = {t: vocab.special_id(task_token(t)) for t in REC_TASKS}
        self.sep = vocab.special_id(SEP)
        self.yes = vocab.special_id(YES)
        self.no = vocab.special_id(NO)
        self.code_ids = np.array([[vocab.code_id(p, c) for c in range(1, self._k + 1)]
                                  for p in range(1, codes.v + 1)], dtype=np.int64)

    @property
    def _k(self) -> int:
        k = sum(1 for t, kind in self.vocab.kinds.items() if kind == SpecialKind.CODE)
        return k // self.codes.v

    @property
    def v(self) -> int:
        return self.codes.v

    def item_codes(self, item_id: str) -> list[int]:
        j = self.index.get(item_id)
        if j is None:
            raise UnknownItemError(f"item {item_id!r} has no semantic id")
        return [int(self.code_ids[p, c - 1]) for p, c in enumerate(self.codes.column(j))]

    def history_codes(self, history: Sequence[str]) -> list[int]:
        if not history:
            raise ValidationError("empty history")
        out = []
        for iid in history[-self.max_history:]:
            out.extend(self.item_codes(iid))
        return out

    def retrieval_prompt(self, history: Sequence[str]) -> list[int]:
        return [self.task[REC_TASK]] + self.history_codes(history)

    def retrieval_sample(self, seq: UserSequence) -> RecSample:
        prompt = self.retrieval_prompt(seq.history)
        target = self.item_codes(seq.target)
        return _answer(SampleKind.RETRIEVAL, prompt, target, label=seq.target)

    def alignment_sample(self, item: ItemRecord, index: int) -> RecSample:
        codes = self.item_codes(item.item_id)
        text = self.vocab.encode(item.attributes[0][1]).ids
        if index % 2 == 0:
            return _answer(SampleKind.ALIGNMENT, [self.task[ALIGN_TASK]] + codes, text + [self.vocab.eos_id], label="text")
        return _answer(SampleKind.ALIGNMENT, [self.task[ALIGN_TASK]] + text + [self.sep], codes, label="codes")

    def scoring_prompt(self, history: Sequence[str], candidate: str) -> list[int]:
        return [self.task[SCORE_TASK]] + self.history_codes(history) + [self.sep] + self.item_codes(candidate)

    def scoring_sample(self, history: Sequence[str], candidate: str, clicked: bool) -> RecSample:
        return _answer(SampleKind.SCORING, self.scoring_prompt(history, candidate),
                       [self.yes if clicked else self.no], label=bool(clicked))


def _answer(kind, prompt: list[int], answer: list[int], label=None) -> RecSample:
    ids = prompt + answer
    loss = [False] * len(ids)
    for j in range(len(prompt) - 1, len(ids) - 1):
        loss[j] = True
    return RecSample(kind, ids, loss, label)


def build_retrieval_sample(seq: UserSequence, prompter: Prompter) -> RecSample:
    return prompter.retrieval_sample(seq)


def build_alignment_sample(item: ItemRecord, index: int, prompter: Prompter) -> RecSample:
    return prompter.alignment_sample(item, index)


def prefix_augment(seq: UserSequence) -> list[UserSequence]:
    """Every proper prefix of ``history + [target]`` with at least one history item."""
    full = seq.history + [seq.target]
    return [UserSequence(seq.user_id, full[:i], full[i]) for i in range(1, len(full))]


def scoring_samples(seqs: Sequence[UserSequence], prompter: Prompter, catalog: Sequence[str],
                    rng: np.random.Generator, negatives: int = 3) -> list[RecSample]:
    """One clicked target and ``negatives`` uniform non-target items per sequence."""
    out = []
    for s in seqs:
        out.append(prompter.scoring_sample(s.history, s.target, True))
        for neg in sample_negatives(s.target, catalog, negatives, rng):
            out.append(prompter.scoring_sample(s.history, neg, False))
    return out


def sample_negatives(target: str, catalog: Sequence[str], count: int, rng: np.random.Generator) -> list[str]:
    pool = [c for c in catalog if c != target]
    if count > len(pool):
        raise ValidationError("catalog too small for the requested negatives")
    return [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]


# -- batched forward ---------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    return ids


def sample_loss(model: Backbone, samples: Sequence[RecSample], pad_id: int) -> nm.Tensor:
    ids = pad_batch([s.ids for s in samples], pad_id)
    loss = np.zeros(ids.shape, dtype=bool)
    for b, s in enumerate(samples):
        loss[b, : len(s.loss)] = s.loss
    targets = np.zeros_like(ids)
    targets[:, :-1] = ids[:, 1:]
    # right padding: real tokens never attend to pads under a causal mask
    _, logits = model.forward(model.embed_ids(ids), causal_mask(ids.shape[1]))
    return nm.cross_entropy(logits, targets, loss)


def last_logits(model: Backbone, prompts: Sequence[Sequence[int]]) -> np.ndarray:
    """Vocabulary logits at the final position of equal-length prompts, float64."""
    ids = np.asarray(prompts, dtype=np.int64)
    with nm.no_grad():
        hidden = model.hidden_states(model.embed_ids(ids), causal_mask(ids.shape[1]))
        logits = model.lm_head(hidden[:, -1])
    return logits.data.astype(np.float64)


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = x - np.where(np.isfinite(m), m, 0.0)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- inference ---------------------------------------------------------------


class BeamMode(str, enum.Enum):
    CONDITIONAL = "conditional"
    SOFT = "soft"
    LITERAL_ZERO = "literal-zero"


@dataclass
class Candidate:
    codes: tuple[int, ...]
    log_prob: float
    item_id: str | None

    @property
    def valid(self) -> bool:
        return self.item_id is not None


def step_log_probs(logits: np.ndarray, allowed: list[int] | None, k: int, mode: BeamMode) -> np.ndarray:
    """Log-probabilities over the k codes of one position (1-based codes at index c-1)."""
    z = np.array(logits, dtype=np.float64)
    if allowed is not None and mode is not BeamMode.SOFT:
        invalid = np.ones(k, dtype=bool)
        invalid[np.asarray(allowed, dtype=np.int64) - 1] = False
        z[invalid] = -np.inf if mode is BeamMode.CONDITIONAL else 0.0
    return log_softmax(z)


def conditional_beam_search(prompt: Sequence[int], model: Backbone, tree: CodeTree, prompter: Prompter,
                            beam_width: int, mode: BeamMode | str = BeamMode.CONDITIONAL) -> list[Candidate]:
    """Top-``beam_width`` code sequences by cumulative log-probability.

    Ties go to the lexicographically smaller code tuple.  In conditional
    mode codes absent from the current trie node get probability zero, so
    every result is a catalog item; other modes may return invalid tuples
    (``item_id`` is None).
    """
    if beam_width < 1:
        raise ValidationError("beam width must be >= 1")
    mode = BeamMode(mode)
    v, k = prompter.v, prompter.code_ids.shape[1]
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for p in range(v):
        prompts = [list(prompt) + [int(prompter.code_ids[i, c - 1]) for i, c in enumerate(prefix)] for prefix, _ in beams]
        logits = last_logits(model, prompts)[:, prompter.code_ids[p]]
        expanded = []
        for (prefix, score), row in zip(beams, logits):
            node = tree.node(prefix)
            allowed = sorted(node) if node is not None else None
            lp = step_log_probs(row, allowed, k, mode)
            for c in range(1, k + 1):
                if np.isfinite(lp[c - 1]):
                    expanded.append((prefix + (c,), score + float(lp[c - 1])))
        expanded.sort(key=lambda t: (-t[1], t[0]))
        beams = expanded[:beam_width]
    return [Candidate(prefix, score, tree.item(prefix)) for prefix, score in beams]


def exhaustive_ranking(prompt: Sequence[int], model: Backbone, tree: CodeTree, prompter: Prompter) -> list[Candidate]:
    """Teacher-forced score of every catalog item under the conditional masking rule."""
    v, k = prompter.v, prompter.code_ids.shape[1]
    out = []
    for col, iid in sorted(tree.items.items()):
        total = 0.0
        for p in range(v):
            seq = list(prompt) + [int(prompter.code_ids[i, c - 1]) for i, c in enumerate(col[:p])]
            row = last_logits(model, [seq])[0, prompter.code_ids[p]]
            total += float(step_log_probs(row, tree.children(col[:p]), k, BeamMode.CONDITIONAL)[col[p] - 1])
        out.append(Candidate(col, total, iid))
    out.sort(key=lambda c: (-c.log_prob, c.codes))
    return out


def recommend(seq: UserSequence, model: Backbone, tree: CodeTree, prompter: Prompter, beam_width: int,
              mode: BeamMode | str = BeamMode.CONDITIONAL) -> list[Candidate]:
    return conditional_beam_search(prompter.retrieval_prompt(seq.history), model, tree, prompter, beam_width, mode)


def score_candidate(history: Sequence[str], candidate: str, model: Backbone, prompter: Prompter) -> float:
    return score_candidates(history, [candidate], model, prompter)[0]


def score_candidates(history: Sequence[str], candidates: Sequence[str], model: Backbone, prompter: Prompter) -> list[float]:
    """P(yes) from a softmax over exactly the {yes, no} logits at the final position."""
    prompts = [prompter.scoring_prompt(history, c) for c in candidates]
    logits = last_logits(model, prompts)
    pair = logits[:, [prompter.yes, prompter.no]]
    return [float(x) for x in np.exp(log_softmax(pair))[:, 0]]


def retrieval_results(seqs: Sequence[UserSequence], model: Backbone, tree: CodeTree, prompter: Prompter,
                      beam_width: int, mode=BeamMode.CONDITIONAL) -> tuple[list[RetrievalResult], list[dict]]:
    results, rows = [], []
    for s in seqs:
        cands = recommend(s, model, tree, prompter, beam_width, mode)
        # invalid tuples stay in the ranking as misses
        ranked = [c.item_id if c.valid else f"<invalid:{'-'.join(map(str, c.codes))}>" for c in cands]
        results.append(RetrievalResult(tuple(ranked), s.target))
        rows.append({"user_id": s.user_id, "ranked_items": ranked, "log_probs": [c.log_prob for c in cands]})
    return results, rows


def write_predictions(path: str | Path, rows: Sequence[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# -- training ----------------------------------------------------------------


@dataclass
class Schedule:
    lr: float = 1e-3
    batch_size: int = 32
    phase1_max_epochs: int = 10
    phase1_patience: int = 2
    max_epochs: int = 30
    patience: int = 5
    beam_width: int = 10
    alignment: bool = True
    clip: float = 1.0
    scoring_epochs: int = 8
    scoring_lr: float = 3e-3
    negatives: int = 3


@dataclass
class RecTrainReport:
    val_recall: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    phase_switch_epoch: int | None = None
    best_epoch: int = 0
    best_recall: float = -1.0


def init_code_rows(model: Backbone, vocab: Vocabulary, codes: CodeMatrix, dense: np.ndarray | None, seed: int):
    """Initialise code and recommender-task rows.

    With ``dense`` (v x n x D) each code row starts at the mean word
    embedding plus the direction of its cluster's mean dense output, scaled
    to the typical word-embedding norm.  Unused codes and task rows get the
    mean word embedding plus small noise.
    """
    rng = np.random.default_rng(seed)
    table = model.params["tok_emb"].data
    words = table[vocab.word_ids]
    mean = words.mean(axis=0)
    scale = float(np.linalg.norm(words, axis=1).mean())
    rows = vocab.ids_of_kind(SpecialKind.CODE) + [vocab.special_id(task_token(t)) for t in REC_TASKS]
    for i in rows:
        table[i] = mean + rng.normal(0.0, 0.02, table.shape[1])
    if dense is None:
        return
    dense = np.asarray(dense, dtype=np.float64)
    for p in range(codes.v):
        centre = dense[p].mean(axis=0)
        for c in np.unique(codes.codes[p]):
            direction = dense[p][codes.codes[p] == c].mean(axis=0) - centre
            norm = np.linalg.norm(direction)
            if norm > 0:
                table[vocab.code_id(p + 1, int(c))] = mean + direction / norm * scale


def train_recommender(model: Backbone, prompter: Prompter, train: Sequence[UserSequence], val: Sequence[UserSequence],
                      items: Sequence[ItemRecord], tree: CodeTree, schedule: Schedule, seed: int,
                      on_epoch: Callable[[int, float, float], None] | None = None) -> RecTrainReport:
    """Phase 1 mixes retrieval and alignment prompts until validation Recall@5
    stops improving; phase 2 is retrieval-only with early stopping.  The
    best validation state is restored at the end."""
    rng = np.random.default_rng(seed)
    partition = model.partition_parameters(FreezePolicy.RECOMMENDER_FREEZE, prompter.vocab)
    augmented = [a for s in train for a in prefix_augment(s.capped(prompter.max_history + 1))]
    retrieval = [prompter.retrieval_sample(s) for s in augmented]
    alignment = [prompter.alignment_sample(it, i) for i, it in enumerate(items)] if schedule.alignment else []
    report = RecTrainReport()
    best_state = {n: p.data.copy() for n, p in model.params.items()}
    phase, stale = 1, 0
    adam = nm.AdamState(lr=schedule.lr)
    for epoch in range(schedule.max_epochs):
        pool = retrieval + alignment if phase == 1 else retrieval
        r = run_epochs(model, partition, lambda e: _batches(pool, schedule.batch_size, rng),
                       lambda group: sample_loss(model, group, prompter.vocab.pad_id),
                       1, schedule.lr, clip=schedule.clip, label=f"rec phase {phase}", state=adam)
        results, _ = retrieval_results(val, model, tree, prompter, schedule.beam_width)
        recall = recall_at_k(results, 5)
        report.losses.append(r.epoch_losses[-1])
        report.val_recall.append(recall)
        log.info("rec epoch %d phase %d loss %.4f val recall@5 %.4f", epoch + 1, phase, r.epoch_losses[-1], recall)
        if on_epoch is not None:
            on_epoch(epoch, r.epoch_losses[-1], recall)
        if recall > report.best_recall:
            report.best_recall, report.best_epoch, stale = recall, epoch + 1, 0
            best_state = {n: p.data.copy() for n, p in model.params.items()}
        else:
            stale += 1
        if phase == 1 and (stale >= schedule.phase1_patience or epoch + 1 >= schedule.phase1_max_epochs):
            phase, stale = 2, 0
            report.phase_switch_epoch = epoch + 1
        elif phase == 2 and stale >= schedule.patience:
            break
    model.load_state_dict(best_state)
    return report


def scoring_loss(model: Backbone, samples: Sequence[RecSample], prompter: Prompter) -> nm.Tensor:
    """Cross-entropy over the {yes, no} pair at each prompt's final position."""
    ids = pad_batch([s.ids for s in samples], prompter.vocab.pad_id)
    hidden = model.hidden_states(model.embed_ids(ids), causal_mask(ids.shape[1]))
    last = np.array([len(s.ids) - 2 for s in samples])
    logits = model.lm_head(hidden[np.arange(len(samples)), last])[:, [prompter.yes, prompter.no]]
    targets = np.array([[0 if s.label else 1] for s in samples])
    return nm.cross_entropy(logits.reshape(len(samples), 1, 2), targets, np.ones((len(samples), 1), dtype=bool))


def train_scoring(model: Backbone, prompter: Prompter, train: Sequence[UserSequence], schedule: Schedule,
                  seed: int, on_epoch=None):
    """Yes/no fine-tune: one clicked target and ``negatives`` random items per user, fresh each epoch."""
    rng = np.random.default_rng(seed)
    partition = model.partition_parameters(FreezePolicy.RECOMMENDER_FREEZE, prompter.vocab)
    catalog = list(prompter.codes.item_ids)
    adam = nm.AdamState(lr=schedule.scoring_lr)
    losses = []
    for epoch in range(schedule.scoring_epochs):
        pool = scoring_samples(train, prompter, catalog, rng, schedule.negatives)
        r = run_epochs(model, partition, lambda e: _batches(pool, schedule.batch_size, rng),
                       lambda group: scoring_loss(model, group, prompter),
                       1, schedule.scoring_lr, clip=schedule.clip, label="scoring", state=adam)
        losses.append(r.epoch_losses[-1])
        log.info("scoring epoch %d loss %.4f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return losses
