"""Stage runner: every stage reads its upstream artifacts from disk and writes
its own under ``workdir/<stage>/`` with a manifest carrying the config hash."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import clusterer as cl
from . import recommender as rc
from .backbone import Backbone, BackboneConfig
from .config import STAGES, PipelineConfig, write_config_file
from .corpus import SyntheticSpec, generate_synthetic, read_sequences, split_users, write_corpus, write_sequences
from .errors import StoreError, ValidationError
from .metrics import ScoringImpression, format_table, retrieval_report, scoring_report, write_report
from .storage import dump_json
from .textcodec import Vocabulary, build_vocab, register_specials
from .tokenizer import (DenseEmbeddingMatrix, extract_dense_embeddings, init_special_rows, pretrain_lm,
                        read_catalog, task_names_for, train_tokenizer, write_catalog)

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
MANIFEST = "manifest.json"


class StageError(StoreError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class StaleArtifactError(ValidationError):
    pass


def _seed(cfg: PipelineConfig, offset: int) -> int:
    return cfg.seed * 1009 + offset


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def manifest(self, stage: str) -> dict | None:
        path = self.dir(stage) / MANIFEST
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return None

    def is_valid(self, stage: str, cfg: PipelineConfig) -> bool:
        m = self.manifest(stage)
        if m is None or m.get("version") != ARTIFACT_VERSION or m.get("config_hash") != cfg.stage_hash(stage):
            return False
        return all((self.dir(stage) / name).exists() for name in m.get("outputs", []))

    def check_upstream(self, stage: str, cfg: PipelineConfig, force: bool = False):
        for up in STAGES[: STAGES.index(stage)]:
            if up.startswith("eval-"):
                continue
            m = self.manifest(up)
            if m is None:
                raise StaleArtifactError(f"missing upstream artifact for stage {up}; run it first")
            if not force and m.get("config_hash") != cfg.stage_hash(up):
                raise StaleArtifactError(f"upstream stage {up} was produced with config hash {m.get('config_hash')}, "
                                         f"current config hashes to {cfg.stage_hash(up)} (use --force to override)")

    def finish(self, stage: str, cfg: PipelineConfig, outputs: list[str]):
        dump_json(self.dir(stage) / MANIFEST, {"version": ARTIFACT_VERSION, "stage": stage,
                                               "config_hash": cfg.stage_hash(stage), "outputs": sorted(outputs)})


def _meta(cfg: PipelineConfig, stage: str) -> dict:
    return {"version": ARTIFACT_VERSION, "config_hash": cfg.stage_hash(stage)}


# -- stages ------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("synth")
    if cfg.items_path:
        if not cfg.sequences_path:
            raise ValidationError("items_path requires sequences_path")
        items = read_catalog(cfg.items_path, cfg.content_attrs)
        seqs = read_sequences(cfg.sequences_path)
        known = {it.item_id for it in items}
        for s in seqs:
            missing = [i for i in s.history + [s.target] if i not in known]
            if missing:
                raise ValidationError(f"user {s.user_id} references unknown item {missing[0]}")
        write_catalog(out / "items.jsonl", items)
        write_sequences(out / "sequences.tsv", seqs)
        stats = {"source": "files", "items": len(items), "users": len(seqs)}
    else:
        spec = SyntheticSpec(n_items=cfg.n_items, n_topics=cfg.n_topics, n_users=cfg.n_users, coherence=cfg.coherence,
                             groups_per_topic=cfg.groups_per_topic, chain_prob=cfg.chain_prob,
                             min_history=cfg.min_history, max_history=cfg.max_history_gen, seed=cfg.seed)
        corpus = generate_synthetic(spec)
        write_corpus(corpus, out / "items.jsonl", out / "sequences.tsv")
        seqs = corpus.sequences
        sizes = np.bincount(list(corpus.topic_of.values()), minlength=cfg.n_topics)
        stats = {"source": "synthetic", "items": len(corpus.items), "users": len(seqs), "topic_sizes": sizes.tolist()}
    train, val, test = split_users(seqs, _seed(cfg, 1), cfg.val_frac, cfg.test_frac)
    dump_json(out / "split.json", {"train": [s.user_id for s in train], "val": [s.user_id for s in val],
                                   "test": [s.user_id for s in test], **_meta(cfg, "synth")})
    dump_json(out / "stats.json", {**stats, **_meta(cfg, "synth")})
    return ["items.jsonl", "sequences.tsv", "split.json", "stats.json"]


def _load_corpus(cfg: PipelineConfig, ws: Workspace):
    d = ws.dir("synth")
    items = read_catalog(d / "items.jsonl", cfg.content_attrs)
    seqs = {s.user_id: s for s in read_sequences(d / "sequences.tsv")}
    split = json.loads((d / "split.json").read_text(encoding="utf-8"))
    parts = tuple([seqs[u] for u in split[name]] for name in ("train", "val", "test"))
    return items, parts


def stage_tokenizer(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("tokenizer-train")
    items, _ = _load_corpus(cfg, ws)
    vocab = build_vocab(text for it in items for _, text in it.attributes)
    attr_names = [name for name, _ in items[0].attributes]
    register_specials(vocab, cfg.v, task_names_for(attr_names, cfg.content_attrs) + list(rc.REC_TASKS), cfg.k)
    model = Backbone(BackboneConfig(vocab_size=len(vocab), layers=cfg.layers, model_dim=cfg.model_dim, heads=cfg.heads,
                                    ffn_dim=cfg.ffn_dim, max_seq_len=cfg.max_seq_len), seed=_seed(cfg, 2))
    pre = pretrain_lm(items, model, vocab, cfg.pretrain_epochs, seed=_seed(cfg, 3), lr=cfg.pretrain_lr)
    model.attach_lora(cfg.tokenizer_lora_rank, seed=_seed(cfg, 4))
    init_special_rows(model, vocab, _seed(cfg, 5))
    rep = train_tokenizer(items, model, vocab, cfg.tokenizer_epochs, seed=_seed(cfg, 6), v=cfg.v, lr=cfg.tokenizer_lr,
                          batch_size=cfg.tokenizer_batch_size, direction=cfg.mask_direction,
                          stop_gradient_fill=cfg.stop_gradient_fill)
    vocab.save(out / "vocab.json")
    model.save(out / "tokenizer", _meta(cfg, "tokenizer-train"))
    dump_json(out / "report.json", {"pretrain_losses": pre.epoch_losses, "initial_loss": rep.initial_loss,
                                    "epoch_losses": rep.epoch_losses, "samples_per_epoch": rep.samples_per_epoch,
                                    **_meta(cfg, "tokenizer-train")})
    return ["vocab.json", "tokenizer.json", "tokenizer.bin", "report.json"]


def stage_embed(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    items, _ = _load_corpus(cfg, ws)
    tok = ws.dir("tokenizer-train")
    vocab = Vocabulary.load(tok / "vocab.json")
    model, _ = Backbone.load(tok / "tokenizer")
    E = extract_dense_embeddings(items, model, vocab, cfg.v)
    E.save(ws.dir("embed") / "dense", _meta(cfg, "embed"))
    return ["dense.json", "dense.bin"]


def stage_cluster(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("cluster")
    E, _ = DenseEmbeddingMatrix.load(ws.dir("embed") / "dense")
    res = cl.assign_codes(E.tensor, E.item_ids, cfg.d, cfg.k, seed=_seed(cfg, 7), global_pca=cfg.global_pca)
    before = len(set(res.codes.columns()))
    codes, moved = cl.resolve_collisions(res.codes, res.reduced, [km.centroids for km in res.kmeans])
    codes.write_tsv(out / "codes.tsv")
    cl.save_cluster_models(out / "models", res, _meta(cfg, "cluster"))
    dump_json(out / "report.json", {
        "items": codes.n, "distinct_before": before, "moved": len(moved), "moved_fraction": len(moved) / codes.n,
        "capacity": cl.identifier_capacity(cfg.k, cfg.v),
        "cluster_sizes": [km.counts.tolist() for km in res.kmeans],
        "explained_variance_ratio": [p.explained_variance_ratio.tolist() for p in res.pcas],
        **_meta(cfg, "cluster")})
    return ["codes.tsv", "models.json", "models.bin", "report.json"]


def _rec_inputs(cfg: PipelineConfig, ws: Workspace):
    items, parts = _load_corpus(cfg, ws)
    vocab = Vocabulary.load(ws.dir("tokenizer-train") / "vocab.json")
    codes = cl.CodeMatrix.read_tsv(ws.dir("cluster") / "codes.tsv")
    prompter = rc.Prompter(vocab, codes, cfg.max_history)
    return items, parts, vocab, codes, prompter, rc.CodeTree.from_codes(codes)


def _schedule(cfg: PipelineConfig) -> rc.Schedule:
    return rc.Schedule(lr=cfg.rec_lr, batch_size=cfg.rec_batch_size, phase1_max_epochs=cfg.phase1_max_epochs,
                       phase1_patience=cfg.phase1_patience, max_epochs=cfg.rec_max_epochs, patience=cfg.patience,
                       beam_width=cfg.beam_width, alignment=cfg.alignment, scoring_epochs=cfg.scoring_epochs,
                       scoring_lr=cfg.scoring_lr, negatives=cfg.negatives)


def stage_rec_train(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("rec-train")
    items, (train, val, _), vocab, codes, prompter, tree = _rec_inputs(cfg, ws)
    model, _ = Backbone.load(ws.dir("tokenizer-train") / "tokenizer")
    model.merge_lora()
    model.attach_lora(cfg.rec_lora_rank, seed=_seed(cfg, 8))
    rc.init_code_rows(model, vocab, codes, None, _seed(cfg, 9))
    meta = _meta(cfg, "rec-train")
    model.save(out / "initial", meta)
    schedule = _schedule(cfg)
    rep = rc.train_recommender(model, prompter, train, val, items, tree, schedule, seed=_seed(cfg, 10))
    model.save(out / "recommender", meta)
    scoring_losses = rc.train_scoring(model, prompter, train, schedule, seed=_seed(cfg, 11))
    model.save(out / "scorer", meta)
    dump_json(out / "report.json", {"val_recall@5": rep.val_recall, "losses": rep.losses,
                                    "phase_switch_epoch": rep.phase_switch_epoch, "best_epoch": rep.best_epoch,
                                    "best_val_recall@5": rep.best_recall, "scoring_losses": scoring_losses,
                                    "alignment": cfg.alignment, **meta})
    return ["initial.json", "initial.bin", "recommender.json", "recommender.bin", "scorer.json", "scorer.bin",
            "report.json"]


def stage_eval_retrieval(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("eval-retrieval")
    _, (_, _, test), _, _, prompter, tree = _rec_inputs(cfg, ws)
    model, _ = Backbone.load(ws.dir("rec-train") / "recommender")
    results, rows = rc.retrieval_results(test, model, tree, prompter, cfg.beam_width, cfg.beam_mode())
    rc.write_predictions(out / "predictions.jsonl", rows)
    ks = [k for k in (1, 5, 10, 20) if k <= cfg.beam_width]
    report = retrieval_report(results, ks, cfg.beam_width)
    emitted = [r for row in rows for r in row["ranked_items"]]
    report["valid_fraction"] = sum(not r.startswith("<invalid") for r in emitted) / max(len(emitted), 1)
    report["beam_mode"] = cfg.beam_mode()
    report.update(_meta(cfg, "eval-retrieval"))
    write_report(out / "report.json", report)
    print(format_table(report))
    return ["predictions.jsonl", "report.json"]


def scoring_impressions(test, catalog, negatives: int, seed: int):
    rng = np.random.default_rng(seed)
    out = []
    for s in test:
        cands = [s.target] + rc.sample_negatives(s.target, catalog, negatives, rng)
        out.append((s, cands))
    return out


def stage_eval_scoring(cfg: PipelineConfig, ws: Workspace) -> list[str]:
    out = ws.dir("eval-scoring")
    _, (_, _, test), _, codes, prompter, _ = _rec_inputs(cfg, ws)
    plan = scoring_impressions(test, codes.item_ids, cfg.eval_negatives, _seed(cfg, 12))
    report = {}
    rows = []
    for name in ("scorer", "initial"):
        model, _ = Backbone.load(ws.dir("rec-train") / name)
        imps = []
        for s, cands in plan:
            scores = rc.score_candidates(s.history, cands, model, prompter)
            imps.append(ScoringImpression(cands, scores, [1] + [0] * (len(cands) - 1)))
            if name == "scorer":
                rows.append({"user_id": s.user_id, "candidates": cands, "scores": scores})
        report["trained" if name == "scorer" else "untrained"] = scoring_report(imps)
    rc.write_predictions(out / "scores.jsonl", rows)
    report.update(_meta(cfg, "eval-scoring"))
    write_report(out / "report.json", report)
    for key in ("trained", "untrained"):
        print(f"[{key}]\n" + format_table(report[key]))
    return ["scores.jsonl", "report.json"]


STAGE_FUNCS: dict[str, Callable[[PipelineConfig, Workspace], list[str]]] = {
    "synth": stage_synth,
    "tokenizer-train": stage_tokenizer,
    "embed": stage_embed,
    "cluster": stage_cluster,
    "rec-train": stage_rec_train,
    "eval-retrieval": stage_eval_retrieval,
    "eval-scoring": stage_eval_scoring,
}


def run_stage(stage: str, cfg: PipelineConfig, workdir: str | Path, force: bool = False, check: bool = True):
    ws = Workspace(workdir)
    try:
        if check:
            ws.check_upstream(stage, cfg, force)
        d = ws.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        (d / MANIFEST).unlink(missing_ok=True)
        start = time.perf_counter()
        log.info("stage %s: start", stage)
        outputs = STAGE_FUNCS[stage](cfg, ws)
        ws.finish(stage, cfg, outputs)
        log.info("stage %s: done in %.1fs", stage, time.perf_counter() - start)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def run_all(cfg: PipelineConfig, workdir: str | Path, force: bool = False) -> list[str]:
    """Skip leading stages whose artifacts are valid; rerun from the first stale one."""
    ws = Workspace(workdir)
    ws.root.mkdir(parents=True, exist_ok=True)
    write_config_file(ws.root / "config.txt", cfg)
    first = len(STAGES)
    for i, stage in enumerate(STAGES):
        if force or not ws.is_valid(stage, cfg):
            first = i
            break
    ran = []
    for stage in STAGES[first:]:
        run_stage(stage, cfg, workdir, check=False)
        ran.append(stage)
    if not ran:
        log.info("all stages up to date")
    return ran
