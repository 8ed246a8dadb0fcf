"""Dense tokenizer: four-block samples, cascaded attention mask, dual forward.

A training sequence is ``content | token | placeholder | task``.  Pass one
runs ``content | token`` and captures the final hidden states at the v token
positions; pass two runs the whole sequence with those vectors substituted
for the placeholder embeddings and scores the task answer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numeric as nm
from .backbone import Backbone, FreezePolicy, causal_mask
from .errors import DivergenceError, ValidationError
from .numeric import Tensor
from .storage import load_tensors, save_tensors
from .textcodec import (BlockTag, TokenSequence, Vocabulary, dense_token,
                        placeholder_token, task_token)

log = logging.getLogger(__name__)

MASK_DIRECTIONS = ("bottleneck", "paper-literal")


@dataclass
class ItemRecord:
    item_id: str
    attributes: list[tuple[str, str]]
    content_attr_count: int = 1

    def __post_init__(self):
        self.attributes = [(str(n), str(t)) for n, t in self.attributes]
        m = len(self.attributes)
        if m < 1:
            raise ValidationError(f"item {self.item_id}: needs at least one attribute")
        if not 1 <= self.content_attr_count <= m:
            raise ValidationError(f"item {self.item_id}: content_attr_count must be in [1, {m}]")
        names = [n for n, _ in self.attributes]
        if len(set(names)) != m:
            raise ValidationError(f"item {self.item_id}: attribute names must be unique")

    @property
    def m(self) -> int:
        return len(self.attributes)

    def text(self, name: str) -> str:
        return dict(self.attributes)[name]

    def to_json(self) -> dict:
        return {"item_id": self.item_id, "attributes": [list(a) for a in self.attributes]}


def task_names_for(attribute_names: Sequence[str], r: int) -> list[str]:
    """Task ``i`` reconstructs attribute ``i`` when ``i <= r`` and generates it otherwise."""
    return [("reconstruct_" if i < r else "generate_") + name for i, name in enumerate(attribute_names)]


def read_catalog(path: str | Path, content_attr_count: int) -> list[ItemRecord]:
    """Load a JSON-lines item catalog: ``{"item_id": str, "attributes": [[name, text], ...]}``."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                items.append(ItemRecord(str(obj["item_id"]), obj["attributes"], content_attr_count))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed catalog line ({exc})") from exc
    if not items:
        raise ValidationError(f"{path}: empty catalog")
    return items


def write_catalog(path: str | Path, items: Iterable[ItemRecord]):
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class BlockLayout:
    content: tuple[int, int]
    token: tuple[int, int]
    placeholder: tuple[int, int]
    task: tuple[int, int]

    @property
    def v(self) -> int:
        return self.token[1] - self.token[0]

    @property
    def length(self) -> int:
        return self.task[1]

    @classmethod
    def from_sizes(cls, content: int, v: int, task: int) -> "BlockLayout":
        c, t, p = content, content + v, content + 2 * v
        return cls((0, c), (c, t), (t, p), (p, p + task))


@dataclass
class TokenizerSample:
    sequence: TokenSequence
    layout: BlockLayout
    task_index: int
    target: str


def content_block(item: ItemRecord, vocab: Vocabulary) -> TokenSequence:
    seq = TokenSequence([])
    for _, text in item.attributes[: item.content_attr_count]:
        seq = seq + vocab.encode(text)
    return seq.retag(BlockTag.CONTENT)


def token_block(vocab: Vocabulary, v: int) -> TokenSequence:
    return TokenSequence([vocab.special_id(dense_token(i)) for i in range(1, v + 1)], [BlockTag.TOKEN] * v)


def build_sample(item: ItemRecord, task_index: int, vocab: Vocabulary, v: int,
                 max_seq_len: int | None = None) -> TokenizerSample:
    """Assemble ``[a_1..a_r] + [DT] + [PH] + [t_i; a_i; <eos>]`` for 1-based ``task_index``.

    Over-long sequences lose content tokens from the right; the structural
    blocks are never truncated.
    """
    if not 1 <= task_index <= item.m:
        raise ValidationError(f"task_index must be in [1, {item.m}]")
    name, text = item.attributes[task_index - 1]
    tname = task_names_for([n for n, _ in item.attributes], item.content_attr_count)[task_index - 1]
    content = content_block(item, vocab)
    placeholders = TokenSequence([vocab.special_id(placeholder_token(i)) for i in range(1, v + 1)],
                                 [BlockTag.PLACEHOLDER] * v)
    task_ids = [vocab.special_id(task_token(tname))] + vocab.encode(text).ids + [vocab.eos_id]
    task = TokenSequence(task_ids, [BlockTag.TASK] * len(task_ids))
    if max_seq_len is not None:
        room = max_seq_len - 2 * v - len(task)
        if room < 0:
            raise ValidationError(f"item {item.item_id}: structural blocks alone exceed max_seq_len")
        if len(content) > room:
            content = TokenSequence(content.ids[:room], content.tags[:room])
    if not len(content):
        raise ValidationError(f"item {item.item_id}: empty content block")
    seq = content + token_block(vocab, v) + placeholders + task
    return TokenizerSample(seq, BlockLayout.from_sizes(len(content), v, len(task)), task_index, text)


def build_cascaded_mask(layout: BlockLayout, direction: str = "bottleneck") -> np.ndarray:
    """Boolean ``[query, key]`` mask over one sequence.

    Every block is causal internally.  In ``bottleneck`` mode token queries see
    all content keys and task queries see all placeholder keys; every other
    cross-block pair is blocked, so the task block only reaches the content
    through the placeholders.  ``paper-literal`` instead opens content->token
    and placeholder->task.
    """
    if direction not in MASK_DIRECTIONS:
        raise ValidationError(f"mask direction must be one of {MASK_DIRECTIONS}")
    n = layout.length
    mask = np.zeros((n, n), dtype=bool)
    for lo, hi in (layout.content, layout.token, layout.placeholder, layout.task):
        mask[lo:hi, lo:hi] = causal_mask(hi - lo)
    if direction == "bottleneck":
        pairs = [(layout.token, layout.content), (layout.task, layout.placeholder)]
    else:
        pairs = [(layout.content, layout.token), (layout.placeholder, layout.task)]
    for (qlo, qhi), (klo, khi) in pairs:
        mask[qlo:qhi, klo:khi] = True
    return mask


@dataclass
class TokenizerBatch:
    """Block-aligned padded batch: every block starts at the same column for all rows."""

    ids: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    content_width: int
    v: int

    @property
    def pass1_len(self) -> int:
        return self.content_width + self.v

    @property
    def task_start(self) -> int:
        return self.content_width + 2 * self.v


def collate(samples: Sequence[TokenizerSample], pad_id: int, direction: str = "bottleneck") -> TokenizerBatch:
    v = samples[0].layout.v
    cw = max(s.layout.content[1] for s in samples)
    tw = max(s.layout.task[1] - s.layout.task[0] for s in samples)
    S = cw + 2 * v + tw
    B = len(samples)
    ids = np.full((B, S), pad_id, dtype=np.int64)
    pos = np.zeros((B, S), dtype=np.int64)
    mask = np.broadcast_to(np.eye(S, dtype=bool), (B, S, S)).copy()
    targets = np.zeros((B, S), dtype=np.int64)
    loss = np.zeros((B, S), dtype=bool)
    for b, s in enumerate(samples):
        lay = s.layout
        c = lay.content[1]
        tlen = lay.task[1] - lay.task[0]
        idx = np.concatenate([np.arange(c), cw + np.arange(2 * v), cw + 2 * v + np.arange(tlen)])
        ids[b, idx] = s.sequence.ids
        pos[b, idx] = np.arange(lay.length)
        mask[b][np.ix_(idx, idx)] = build_cascaded_mask(lay, direction)
        t0 = cw + 2 * v
        # position j predicts token j+1 inside the task block
        targets[b, t0: t0 + tlen - 1] = s.sequence.ids[lay.task[0] + 1: lay.task[1]]
        loss[b, t0: t0 + tlen - 1] = True
    return TokenizerBatch(ids, pos, mask, targets, loss, cw, v)


def dual_forward_batch(model: Backbone, batch: TokenizerBatch, stop_gradient_fill: bool = False,
                       fill_override: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Returns ``(mean answer-token loss, dense outputs (B, v, D))``."""
    p1 = batch.pass1_len
    x1 = model.embed_ids(batch.ids[:, :p1], batch.positions[:, :p1])
    h1 = model.hidden_states(x1, batch.mask[:, :p1, :p1])
    dense = h1[:, batch.content_width: p1]
    fill = dense.detach() if stop_gradient_fill else dense
    if fill_override is not None:
        fill = fill_override
    x2 = model.embed_ids(batch.ids, batch.positions, fill=fill, fill_start=p1)
    h2 = model.hidden_states(x2, batch.mask)
    t0 = batch.task_start
    logits = model.lm_head(h2[:, t0:])
    loss = nm.cross_entropy(logits, batch.targets[:, t0:], batch.loss_mask[:, t0:])
    return loss, dense


def dual_forward(sample: TokenizerSample, model: Backbone, vocab: Vocabulary,
                 direction: str = "bottleneck", stop_gradient_fill: bool = False) -> tuple[Tensor, Tensor]:
    if model.config.vocab_size != len(vocab):
        raise ValidationError("model vocabulary size does not match the sample vocabulary")
    batch = collate([sample], vocab.pad_id, direction)
    loss, dense = dual_forward_batch(model, batch, stop_gradient_fill)
    return loss, dense[0]


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    samples_per_epoch: int = 0


def _check_loss(loss: Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError("non-finite training loss")
    return value


def run_epochs(model: Backbone, partition, batches_fn: Callable[[int], Iterable], loss_fn: Callable,
               epochs: int, lr: float, clip: float = 1.0, label: str = "train",
               on_epoch: Callable[[int, float], None] | None = None,
               state: nm.AdamState | None = None) -> TrainReport:
    """Shared Adam loop.  ``batches_fn(epoch)`` yields batches, ``loss_fn(batch)`` returns a scalar loss.

    Pass ``state`` to carry optimizer moments across calls.
    """
    state = state if state is not None else nm.AdamState(lr=lr)
    params = partition.trainable_params(model)
    report = TrainReport()
    model.training = True
    # frozen tensors skip weight-gradient work entirely
    for n in partition.frozen:
        model.params[n].requires_grad = False
    try:
        for epoch in range(epochs):
            total, count = 0.0, 0
            for batch in batches_fn(epoch):
                nm.reset_tape()
                try:
                    loss = loss_fn(batch)
                except nm.NonFiniteError as exc:
                    raise DivergenceError(f"{label}: {exc}") from exc
                value = _check_loss(loss)
                if report.initial_loss is None:
                    report.initial_loss = value
                nm.backward(loss)
                for p in params.values():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                nm.clip_grad_norm(params.values(), clip)
                nm.adam_step(params, state, partition.masks)
                total += value
                count += 1
            mean = total / max(count, 1)
            report.epoch_losses.append(mean)
            # single-epoch callers keep their own epoch count
            log.log(logging.INFO if epochs > 1 else logging.DEBUG, "%s epoch %d loss %.4f", label, epoch + 1, mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            if report.initial_loss is not None and mean > 2.0 * report.initial_loss:
                raise DivergenceError(f"{label}: epoch {epoch + 1} mean loss {mean:.4f} exceeds "
                                      f"2x initial loss {report.initial_loss:.4f}")
    finally:
        model.training = False
        for n in partition.frozen:
            model.params[n].requires_grad = True
        nm.reset_tape()
    return report


def _batches(samples: list, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for lo in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[lo: lo + batch_size]]


def pretrain_lm(items: Sequence[ItemRecord], model: Backbone, vocab: Vocabulary, epochs: int,
                seed: int, lr: float = 1e-3, batch_size: int = 32) -> TrainReport:
    """Causal-LM warm-up on the catalog text so word embeddings are no longer random."""
    seqs = []
    for item in items:
        ids = []
        for _, text in item.attributes:
            ids.extend(vocab.encode(text).ids)
        seqs.append(ids[: model.config.max_seq_len - 1] + [vocab.eos_id])
    partition = model.partition_parameters(FreezePolicy.NONE, vocab)
    rng = np.random.default_rng(seed)

    def loss_fn(group):
        width = max(len(s) for s in group)
        ids = np.full((len(group), width), vocab.pad_id, dtype=np.int64)
        loss = np.zeros_like(ids, dtype=bool)
        for b, s in enumerate(group):
            ids[b, : len(s)] = s
            loss[b, : len(s) - 1] = True
        targets = np.zeros_like(ids)
        targets[:, :-1] = ids[:, 1:]
        _, logits = model.forward(model.embed_ids(ids), causal_mask(width))
        return nm.cross_entropy(logits, targets, loss)

    return run_epochs(model, partition, lambda e: _batches(seqs, batch_size, rng), loss_fn,
                      epochs, lr, label="pretrain")


def tokenizer_samples(items: Sequence[ItemRecord], vocab: Vocabulary, v: int, max_seq_len: int) -> list[TokenizerSample]:
    return [build_sample(item, i, vocab, v, max_seq_len) for item in items for i in range(1, item.m + 1)]


def train_tokenizer(items: Sequence[ItemRecord], model: Backbone, vocab: Vocabulary, epochs: int, seed: int,
                    v: int, lr: float = 1e-3, batch_size: int = 32, direction: str = "bottleneck",
                    stop_gradient_fill: bool = False, on_epoch=None) -> TrainReport:
    """Post-pretrain the dense tokenizer on ``m`` replicated samples per item."""
    if not vocab.frozen:
        raise ValidationError("vocabulary must be frozen before tokenizer training")
    samples = tokenizer_samples(items, vocab, v, model.config.max_seq_len)
    partition = model.partition_parameters(FreezePolicy.TOKENIZER_FREEZE, vocab)
    rng = np.random.default_rng(seed)

    def loss_fn(group):
        return dual_forward_batch(model, collate(group, vocab.pad_id, direction), stop_gradient_fill)[0]

    report = run_epochs(model, partition, lambda e: _batches(samples, batch_size, rng), loss_fn,
                        epochs, lr, label="tokenizer", on_epoch=on_epoch)
    report.samples_per_epoch = len(samples)
    return report


def init_special_rows(model: Backbone, vocab: Vocabulary, seed: int):
    """Task rows start at the mean word embedding plus small noise; dense rows at N(0, 0.02)."""
    from .textcodec import SpecialKind

    rng = np.random.default_rng(seed)
    table = model.params["tok_emb"].data
    mean = table[vocab.word_ids].mean(axis=0)
    for i in vocab.ids_of_kind(SpecialKind.TASK):
        table[i] = mean + rng.normal(0.0, 0.002, table.shape[1])
    for i in vocab.ids_of_kind(SpecialKind.DENSE):
        table[i] = rng.normal(0.0, 0.02, table.shape[1])


@dataclass
class DenseEmbeddingMatrix:
    tensor: np.ndarray
    item_ids: list[str]

    @property
    def v(self) -> int:
        return self.tensor.shape[0]

    @property
    def n(self) -> int:
        return self.tensor.shape[1]

    def save(self, prefix, meta: dict | None = None):
        return save_tensors(prefix, {"E": self.tensor}, {"kind": "dense_embeddings", "item_ids": self.item_ids, **(meta or {})})

    @classmethod
    def load(cls, prefix) -> tuple["DenseEmbeddingMatrix", dict]:
        manifest, tensors = load_tensors(prefix)
        if manifest.get("kind") != "dense_embeddings":
            raise ValidationError(f"{prefix} is not a dense-embedding artifact")
        return cls(tensors["E"], list(manifest["item_ids"])), manifest


def dense_outputs(item: ItemRecord, model: Backbone, vocab: Vocabulary, v: int) -> np.ndarray:
    """Pass one only, unbatched: the v final hidden states at the token block."""
    content = content_block(item, vocab)
    room = model.config.max_seq_len - v
    if not len(content):
        raise ValidationError(f"item {item.item_id}: empty content block")
    content = TokenSequence(content.ids[:room], content.tags[:room])
    seq = content + token_block(vocab, v)
    layout = BlockLayout.from_sizes(len(content), v, 0)
    mask = build_cascaded_mask(layout)[: len(seq), : len(seq)]
    with nm.no_grad():
        h = model.hidden_states(model.embed_ids([seq.ids]), mask[None])
    return h.data[0, len(content):]


def extract_dense_embeddings(items: Sequence[ItemRecord], model: Backbone, vocab: Vocabulary, v: int) -> DenseEmbeddingMatrix:
    E = np.stack([dense_outputs(item, model, vocab, v) for item in items], axis=1)
    return DenseEmbeddingMatrix(E.astype(np.float32), [it.item_id for it in items])
