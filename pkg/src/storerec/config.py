"""Pipeline configuration: presets, flat ``key=value`` files, per-stage hashes."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError

STAGES = ("synth", "tokenizer-train", "embed", "cluster", "rec-train", "eval-retrieval", "eval-scoring")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    # corpus; leave items_path empty to generate a synthetic corpus
    items_path: str = ""
    sequences_path: str = ""
    content_attrs: int = 2
    n_items: int = 200
    n_topics: int = 4
    n_users: int = 1000
    coherence: float = 0.9
    groups_per_topic: int = 5
    chain_prob: float = 0.8
    min_history: int = 4
    max_history_gen: int = 12
    val_frac: float = 0.1
    test_frac: float = 0.1
    # backbone
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 128
    pretrain_epochs: int = 15
    pretrain_lr: float = 3e-3
    # dense tokenizer
    v: int = 2
    tokenizer_epochs: int = 20
    tokenizer_lr: float = 3e-3
    tokenizer_lora_rank: int = 8
    tokenizer_batch_size: int = 16
    mask_direction: str = "bottleneck"
    stop_gradient_fill: bool = False
    # clusterer
    d: int = 8
    k: int = 16
    global_pca: bool = False
    # recommender
    rec_lora_rank: int = 8
    rec_lr: float = 1e-3
    rec_batch_size: int = 32
    max_history: int = 10
    phase1_max_epochs: int = 10
    phase1_patience: int = 2
    rec_max_epochs: int = 30
    patience: int = 5
    alignment: bool = True
    scoring_epochs: int = 8
    scoring_lr: float = 3e-3
    negatives: int = 3
    # inference / evaluation
    beam_width: int = 10
    soft_constraints: bool = False
    literal_zero_logit: bool = False
    eval_negatives: int = 9

    def __post_init__(self):
        if self.mask_direction not in ("bottleneck", "paper-literal"):
            raise ValidationError("mask_direction must be 'bottleneck' or 'paper-literal'")
        if self.soft_constraints and self.literal_zero_logit:
            raise ValidationError("soft_constraints and literal_zero_logit are mutually exclusive")
        for name in ("v", "d", "k", "beam_width", "max_history", "layers", "model_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.beam_width < 5:
            raise ValidationError("beam_width must be >= 5 so Recall@5 is defined")

    def updated(self, **changes) -> "PipelineConfig":
        unknown = set(changes) - set(field_types())
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **changes)

    def beam_mode(self) -> str:
        if self.soft_constraints:
            return "soft"
        if self.literal_zero_logit:
            return "literal-zero"
        return "conditional"

    def stage_hash(self, stage: str) -> str:
        """Hash of the keys this stage and every upstream stage read."""
        idx = STAGES.index(stage)
        keys = sorted({k for s in STAGES[: idx + 1] for k in STAGE_KEYS[s]})
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CORPUS = ("seed", "items_path", "sequences_path", "content_attrs", "n_items", "n_topics", "n_users", "coherence",
           "groups_per_topic", "chain_prob", "min_history", "max_history_gen", "val_frac", "test_frac")
STAGE_KEYS = {
    "synth": _CORPUS,
    "tokenizer-train": ("layers", "model_dim", "heads", "ffn_dim", "max_seq_len", "pretrain_epochs", "pretrain_lr",
                        "v", "tokenizer_epochs", "tokenizer_lr", "tokenizer_lora_rank", "tokenizer_batch_size",
                        "mask_direction", "stop_gradient_fill", "k"),
    "embed": (),
    "cluster": ("d", "global_pca"),
    "rec-train": ("rec_lora_rank", "rec_lr", "rec_batch_size", "max_history", "phase1_max_epochs", "phase1_patience",
                  "rec_max_epochs", "patience", "alignment", "scoring_epochs", "scoring_lr", "negatives", "beam_width"),
    "eval-retrieval": ("soft_constraints", "literal_zero_logit"),
    "eval-scoring": ("eval_negatives",),
}

PRESETS = {
    "desk": {},
    # full-size run: 24-layer 1024-dim backbone, four-token ids over 256 clusters (not desk-runnable)
    "paper": dict(v=4, k=256, d=32, tokenizer_lora_rank=32, rec_lora_rank=128, max_history=20,
                  tokenizer_lr=1e-4, rec_lr=5e-4, beam_width=20, layers=24, model_dim=1024, heads=16,
                  ffn_dim=4096, max_seq_len=512, n_items=25634, n_users=50000, max_history_gen=20),
}


def field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(PipelineConfig)}


def parse_value(key: str, text: str):
    kind = field_types().get(key)
    if kind is None:
        raise ValidationError(f"unknown config key {key!r}")
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError as exc:
        raise ValidationError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def read_config_file(path: str | Path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def write_config_file(path: str | Path, config: PipelineConfig):
    lines = [f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in asdict(config).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(preset: str = "desk", path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Preset, then file, then explicit overrides."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}")
    cfg = PipelineConfig().updated(**PRESETS[preset])
    if path is not None:
        cfg = cfg.updated(**read_config_file(path))
    if overrides:
        cfg = cfg.updated(**overrides)
    return cfg
