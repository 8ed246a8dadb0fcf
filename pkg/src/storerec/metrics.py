"""Retrieval metrics over ranked lists and scoring metrics over impressions."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[str, ...]
    target: str

    def __post_init__(self):
        object.__setattr__(self, "ranked", tuple(self.ranked))
        if len(set(self.ranked)) != len(self.ranked):
            raise ValidationError("ranked list contains duplicates")

    def rank(self) -> float:
        """1-based rank of the target, ``inf`` when absent."""
        try:
            return self.ranked.index(self.target) + 1
        except ValueError:
            return math.inf


def _check(results: Sequence[RetrievalResult], k: int):
    if k < 1:
        raise ValidationError("K must be >= 1")
    if not results:
        raise ValidationError("empty result set")


def recall_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    _check(results, k)
    return sum(r.rank() <= k for r in results) / len(results)


def ndcg_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    _check(results, k)
    total = 0.0
    for r in results:
        rank = r.rank()
        if rank <= k:
            total += 1.0 / math.log2(rank + 1)
    return total / len(results)


@dataclass
class ScoringImpression:
    item_ids: list[str]
    scores: list[float]
    labels: list[int]

    def __post_init__(self):
        if not len(self.item_ids) == len(self.scores) == len(self.labels):
            raise ValidationError("impression fields differ in length")

    @property
    def two_class(self) -> bool:
        return 0 < sum(self.labels) < len(self.labels)

    def order(self) -> list[int]:
        # descending score; equal scores keep candidate order
        return sorted(range(len(self.scores)), key=lambda i: -self.scores[i])


def auc(imp: ScoringImpression) -> float:
    """Pairwise AUC with ties counted as one half."""
    if not imp.two_class:
        raise ValidationError("AUC needs at least one positive and one negative")
    s = np.asarray(imp.scores, dtype=np.float64)
    y = np.asarray(imp.labels, dtype=bool)
    pos, neg = s[y][:, None], s[~y][None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return float(wins / (pos.size * neg.size))


def reciprocal_rank(imp: ScoringImpression) -> float:
    for r, i in enumerate(imp.order(), 1):
        if imp.labels[i]:
            return 1.0 / r
    return 0.0


def mrr(impressions: Sequence[ScoringImpression]) -> float:
    if not impressions:
        raise ValidationError("no impressions")
    return sum(reciprocal_rank(i) for i in impressions) / len(impressions)


def impression_ndcg(imp: ScoringImpression, k: int) -> float:
    if k < 1:
        raise ValidationError("K must be >= 1")
    gains = [imp.labels[i] for i in imp.order()[:k]]
    dcg = sum(g / math.log2(r + 2) for r, g in enumerate(gains))
    ideal = sorted(imp.labels, reverse=True)[:k]
    idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def retrieval_report(results: Sequence[RetrievalResult], ks: Sequence[int], beam_width: int | None = None) -> dict:
    if beam_width is not None and max(ks) > beam_width:
        raise ValidationError(f"K={max(ks)} exceeds beam width {beam_width}")
    report = {"queries": len(results)}
    for k in ks:
        report[f"recall@{k}"] = recall_at_k(results, k)
    for k in ks:
        report[f"ndcg@{k}"] = ndcg_at_k(results, k)
    return report


def scoring_report(impressions: Sequence[ScoringImpression], ks: Sequence[int] = (1, 5)) -> dict:
    usable = [i for i in impressions if i.two_class]
    skipped = len(impressions) - len(usable)
    if skipped:
        log.warning("skipping %d single-class impression(s)", skipped)
    if not usable:
        raise ValidationError("no two-class impressions to score")
    report = {
        "impressions": len(usable),
        "skipped_single_class": skipped,
        "auc": float(np.mean([auc(i) for i in usable])),
        "mrr": mrr(usable),
    }
    for k in ks:
        report[f"ndcg@{k}"] = float(np.mean([impression_ndcg(i, k) for i in usable]))
    return report


def format_table(report: dict) -> str:
    width = max(len(k) for k in report)
    lines = []
    for key, value in report.items():
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key:<{width}}  {text}")
    return "\n".join(lines)


def write_report(path: str | Path, report: dict):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=False) + "\n", encoding="utf-8")
