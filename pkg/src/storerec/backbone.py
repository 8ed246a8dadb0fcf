"""Pre-norm decoder-only transformer shared by the dense tokenizer and the recommender.

The attention mask is supplied by the caller for every sequence, so the same
network runs cascaded block masks, plain causal masks and padded batches.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import ValidationError
from .numeric import Tensor
from .storage import load_tensors, save_tensors
from .textcodec import BlockTag, SpecialKind, TokenSequence, Vocabulary

LORA_TARGETS = ("q", "k", "v", "o")


@dataclass
class BackboneConfig:
    vocab_size: int
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 256
    lora_rank: int = 0
    lora_targets: tuple = ("q", "v")
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.model_dim % self.heads:
            raise ValidationError("model_dim must be divisible by heads")
        if not 0 <= self.lora_rank < self.model_dim:
            raise ValidationError("lora_rank must be in [0, model_dim)")
        if any(t not in LORA_TARGETS for t in self.lora_targets):
            raise ValidationError(f"lora_targets must be drawn from {LORA_TARGETS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


class FreezePolicy(str, enum.Enum):
    TOKENIZER_FREEZE = "TOKENIZER_FREEZE"
    RECOMMENDER_FREEZE = "RECOMMENDER_FREEZE"
    NONE = "NONE"


@dataclass
class ParameterPartition:
    """Element-level split of the model parameters.

    ``masks`` maps a parameter name to a 0/1 array (broadcastable to the
    parameter) for parameters that are only partly trainable, e.g. the
    embedding table when just the special-token rows train.
    """

    trainable: set = field(default_factory=set)
    frozen: set = field(default_factory=set)
    masks: dict = field(default_factory=dict)

    def trainable_params(self, model: "Backbone") -> dict[str, Tensor]:
        return {n: p for n, p in model.params.items() if n in self.trainable}

    def counts(self, model: "Backbone") -> tuple[int, int]:
        n_train = n_frozen = 0
        for name, p in model.params.items():
            if name not in self.trainable:
                n_frozen += p.size
                continue
            mask = np.broadcast_to(self.masks.get(name, 1.0), p.shape)
            on = int(np.count_nonzero(mask))
            n_train += on
            n_frozen += p.size - on
        return n_train, n_frozen


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.training = False
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction --

    def _param(self, name: str, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _init_params(self, rng: np.random.Generator):
        c = self.config
        D, std = c.model_dim, c.init_std
        self._param("tok_emb", rng.normal(0.0, std, (c.vocab_size, D)))
        self._param("pos_emb", rng.normal(0.0, std, (c.max_seq_len, D)))
        out_std = std / math.sqrt(2 * c.layers)
        for l in range(c.layers):
            p = f"h{l}"
            self._param(f"{p}.ln1.g", np.ones(D))
            self._param(f"{p}.ln1.b", np.zeros(D))
            for proj in ("q", "k", "v"):
                self._param(f"{p}.attn.{proj}.w", rng.normal(0.0, std, (D, D)))
                self._param(f"{p}.attn.{proj}.b", np.zeros(D))
            self._param(f"{p}.attn.o.w", rng.normal(0.0, out_std, (D, D)))
            self._param(f"{p}.attn.o.b", np.zeros(D))
            self._param(f"{p}.ln2.g", np.ones(D))
            self._param(f"{p}.ln2.b", np.zeros(D))
            self._param(f"{p}.ffn.w1", rng.normal(0.0, std, (D, c.ffn_dim)))
            self._param(f"{p}.ffn.b1", np.zeros(c.ffn_dim))
            self._param(f"{p}.ffn.w2", rng.normal(0.0, out_std, (c.ffn_dim, D)))
            self._param(f"{p}.ffn.b2", np.zeros(D))
        self._param("ln_f.g", np.ones(D))
        self._param("ln_f.b", np.zeros(D))
        if c.lora_rank:
            self._init_lora(rng)

    def _init_lora(self, rng: np.random.Generator):
        c = self.config
        for l in range(c.layers):
            for proj in c.lora_targets:
                base = f"h{l}.attn.{proj}"
                self._param(f"{base}.lora_down", rng.normal(0.0, 1.0 / math.sqrt(c.model_dim), (c.model_dim, c.lora_rank)))
                self._param(f"{base}.lora_up", np.zeros((c.lora_rank, c.model_dim)))

    def attach_lora(self, rank: int, targets=("q", "v"), seed: int = 0):
        """Replace any adapters with fresh ones (``up`` zero-initialised)."""
        self._drop_lora()
        self.config.lora_rank = rank
        self.config.lora_targets = tuple(targets)
        self.config.__post_init__()
        if rank:
            self._init_lora(np.random.default_rng(seed))

    def merge_lora(self):
        """Fold the adapters into the base projections and remove them."""
        c = self.config
        if not c.lora_rank:
            return
        scale = 1.0 / c.lora_rank
        for l in range(c.layers):
            for proj in c.lora_targets:
                base = f"h{l}.attn.{proj}"
                delta = self.params[f"{base}.lora_down"].data.astype(np.float64) @ self.params[f"{base}.lora_up"].data
                w = self.params[f"{base}.w"]
                w.data = (w.data + scale * delta).astype(w.data.dtype)
        self._drop_lora()
        c.lora_rank = 0

    def _drop_lora(self):
        for name in [n for n in self.params if ".lora_" in n]:
            del self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward --

    def _linear(self, x: Tensor, base: str) -> Tensor:
        y = x @ self.params[f"{base}.w"] + self.params[f"{base}.b"]
        down = self.params.get(f"{base}.lora_down")
        if down is not None:
            y = y + ((x @ down) @ self.params[f"{base}.lora_up"]) * (1.0 / self.config.lora_rank)
        return y

    def _dropout(self, x: Tensor) -> Tensor:
        if self.training and self.config.dropout > 0:
            return nm.dropout(x, self.config.dropout, self._rng)
        return x

    def _attention(self, x: Tensor, mask: np.ndarray, l: int) -> Tensor:
        c = self.config
        B, S, D = x.shape
        H, dh = c.heads, c.head_dim
        base = f"h{l}.attn"

        def heads(t):
            return t.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q = heads(self._linear(x, f"{base}.q"))
        k = heads(self._linear(x, f"{base}.k"))
        v = heads(self._linear(x, f"{base}.v"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = nm.masked_softmax(scores, mask[:, None, :, :])
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return self._linear(out, f"{base}.o")

    def hidden_states(self, inputs: Tensor, mask) -> Tensor:
        """Final-norm hidden states for ``(B, S, D)`` inputs under a ``(B, S, S)`` mask."""
        c = self.config
        x = inputs
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None]
        B, S, _ = x.shape
        if S > c.max_seq_len:
            raise ValidationError(f"sequence length {S} exceeds max_seq_len {c.max_seq_len}")
        if mask.shape[-2:] != (S, S):
            raise nm.DimensionError(f"mask shape {mask.shape} does not match sequence length {S}")
        x = self._dropout(x)
        for l in range(c.layers):
            p = f"h{l}"
            h = nm.layer_norm(x, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            x = x + self._dropout(self._attention(h, mask, l))
            h = nm.layer_norm(x, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            h = nm.gelu(h @ self.params[f"{p}.ffn.w1"] + self.params[f"{p}.ffn.b1"])
            x = x + self._dropout(h @ self.params[f"{p}.ffn.w2"] + self.params[f"{p}.ffn.b2"])
        return nm.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])

    def lm_head(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["tok_emb"].transpose()

    def forward(self, inputs: Tensor, mask, logits_at=None) -> tuple[Tensor, Tensor]:
        """Run the stack on ``inputs`` (``(S, D)`` or ``(B, S, D)``) under ``mask``.

        Returns ``(hidden, logits)``: the final-norm hidden states and the
        weight-tied vocabulary logits.  ``logits_at`` restricts logits to the
        given positions (an index into the sequence axis).
        """
        squeeze = inputs.ndim == 2
        x = inputs.reshape(1, *inputs.shape) if squeeze else inputs
        hidden = self.hidden_states(x, mask)
        logits = self.lm_head(hidden if logits_at is None else hidden[:, logits_at])
        if squeeze:
            hidden = hidden.reshape(hidden.shape[1:])
            logits = logits.reshape(logits.shape[1:])
        return hidden, logits

    def embed_ids(self, ids, positions=None, fill: Tensor | None = None, fill_start: int | None = None) -> Tensor:
        """Batched lookup: ``ids`` is ``(B, S)``; ``fill`` (``(B, v, D)``) replaces
        positions ``fill_start .. fill_start+v`` before positional embeddings are added."""
        ids = np.asarray(ids, dtype=np.int64)
        if positions is None:
            positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        tok = nm.embedding(self.params["tok_emb"], ids)
        if fill is not None:
            end = fill_start + fill.shape[1]
            tok = nm.concat([tok[:, :fill_start], fill, tok[:, end:]], axis=1)
        return tok + nm.embedding(self.params["pos_emb"], positions)

    def embed(self, sequence: TokenSequence, placeholder_fill: Tensor | None = None) -> Tensor:
        """Embed one tagged sequence; placeholder rows take ``placeholder_fill`` verbatim."""
        lo, hi = sequence.span(BlockTag.PLACEHOLDER)
        n_ph = hi - lo
        if placeholder_fill is None:
            if n_ph:
                raise ValidationError("sequence has placeholders but no fill was supplied")
            return self.embed_ids([sequence.ids])[0]
        fill = placeholder_fill if isinstance(placeholder_fill, Tensor) else Tensor(placeholder_fill)
        if fill.shape[0] != n_ph:
            raise ValidationError(f"placeholder fill has {fill.shape[0]} vectors, sequence has {n_ph} placeholders")
        return self.embed_ids([sequence.ids], fill=fill.reshape(1, *fill.shape), fill_start=lo)[0]

    # -- parameter partition --

    def partition_parameters(self, policy, vocab: Vocabulary) -> ParameterPartition:
        try:
            policy = FreezePolicy(policy)
        except ValueError as exc:
            raise ValidationError(f"unknown freeze policy {policy!r}") from exc
        names = list(self.params)
        if policy is FreezePolicy.NONE:
            return ParameterPartition(trainable=set(names))
        kinds = [SpecialKind.DENSE, SpecialKind.TASK]
        if policy is FreezePolicy.RECOMMENDER_FREEZE:
            kinds.append(SpecialKind.CODE)
        rows = np.zeros((self.config.vocab_size, 1), dtype=np.float64)
        for kind in kinds:
            rows[vocab.ids_of_kind(kind)] = 1.0
        trainable = {"tok_emb", "ln_f.g", "ln_f.b"} | {n for n in names if ".lora_" in n}
        return ParameterPartition(trainable=trainable, frozen=set(names) - trainable, masks={"tok_emb": rows})

    # -- persistence --

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValidationError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
        for n, arr in state.items():
            if arr.shape != self.params[n].shape:
                raise ValidationError(f"shape mismatch for {n}: {arr.shape} vs {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=self.params[n].data.dtype)

    def save(self, prefix: str | Path, meta: dict | None = None) -> Path:
        cfg = asdict(self.config)
        cfg["lora_targets"] = list(cfg["lora_targets"])
        return save_tensors(prefix, self.state_dict(), {"kind": "backbone", "config": cfg, **(meta or {})})

    @classmethod
    def load(cls, prefix: str | Path) -> tuple["Backbone", dict]:
        manifest, tensors = load_tensors(prefix)
        if manifest.get("kind") != "backbone":
            raise ValidationError(f"{prefix} is not a backbone checkpoint")
        model = cls(BackboneConfig(**manifest["config"]))
        model.load_state_dict(tensors)
        return model, manifest


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
