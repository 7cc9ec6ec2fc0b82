"""Command orchestration: artifacts, caching, and the end-to-end flows.

Run directories are keyed by content hashes of the resolved configuration:
training artifacts by the training-relevant sections, index artifacts by
those plus the retrieval sections.  Identical configurations therefore
share cached checkpoints and indexes across commands and ablation cells.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch
import yaml

from . import report
from .asmk import (AsmkIndex, aggregate_binarize, build_signature_index,
                   load_index, save_index, search_signatures, select_top_features,
                   train_codebook, Codebook, memory_footprint)
from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash, config_to_dict
from .errors import IndexEmpty, SuperfeatError
from .evaluation import (attention_correlation, class_ground_truth,
                         evaluate_retrieval, mean_average_precision,
                         mean_offdiagonal, per_scale_stats, redundancy_curve)
from .matching import global_descriptor
from .model import RetrievalModel
from .synthetic import SyntheticDataset, generate_synthetic_dataset
from .training import VAL_SEED_OFFSET, train

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 202
RUN_ROOT_ENV = "SUPERFEAT_RUN_ROOT"

_TRAINING_SECTIONS = ("seed", "data", "encoder", "templates", "whitening",
                      "loss", "match", "train")


def run_root(override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _hash_sections(cfg: RunConfig, sections) -> str:
    full = config_to_dict(cfg)
    subset = {name: full[name] for name in sections}
    blob = json.dumps(subset, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def training_hash(cfg: RunConfig) -> str:
    return _hash_sections(cfg, _TRAINING_SECTIONS)


def index_hash(cfg: RunConfig) -> str:
    return _hash_sections(cfg, _TRAINING_SECTIONS + ("retrieval",))


def model_dir(cfg: RunConfig, root: Path) -> Path:
    return root / "models" / training_hash(cfg)


def index_dir(cfg: RunConfig, root: Path) -> Path:
    return root / "index" / index_hash(cfg)


def run_dir(cfg: RunConfig, root: Path) -> Path:
    return root / "runs" / config_hash(cfg)


def prepare_run(cfg: RunConfig, root: Path) -> Path:
    directory = run_dir(cfg, root)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(
        yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    return directory


def dataset_for_split(cfg: RunConfig, split: str) -> SyntheticDataset:
    d = cfg.data
    if split == "train":
        return generate_synthetic_dataset(d.train_classes, d.train_images_per_class,
                                          seed=cfg.seed, image_size=d.image_size)
    if split == "val":
        return generate_synthetic_dataset(d.val_classes, d.val_images_per_class,
                                          seed=cfg.seed + VAL_SEED_OFFSET,
                                          image_size=d.image_size)
    if split == "eval":
        return generate_synthetic_dataset(d.eval_classes, d.eval_images_per_class,
                                          seed=cfg.seed + EVAL_SEED_OFFSET,
                                          image_size=d.image_size)
    raise ValueError(f"unknown split '{split}'")


def cmd_gen_data(cfg: RunConfig, root: Path) -> dict:
    """Materialize all three synthetic splits under the run directory."""
    directory = prepare_run(cfg, root) / "data"
    directory.mkdir(exist_ok=True)
    written = {}
    for split in ("train", "val", "eval"):
        ds = dataset_for_split(cfg, split)
        path = directory / f"{split}.npz"
        np.savez_compressed(
            path,
            pixels=np.stack([img.pixels for img in ds.images]),
            labels=np.array(ds.labels),
            ids=np.array([img.id for img in ds.images]),
        )
        (directory / f"{split}_params.json").write_text(
            json.dumps(ds.params, indent=2))
        written[split] = path
        log.info("wrote %s (%d images)", path, len(ds))
    return written


def cmd_train(cfg: RunConfig, root: Path, force: bool = False):
    """Train into the model cache directory keyed by the training hash."""
    directory = model_dir(cfg, root)
    checkpoint = directory / "checkpoint.pt"
    if checkpoint.exists() and not force:
        log.info("reusing cached checkpoint %s", checkpoint)
        return checkpoint
    result = train(cfg, directory)
    return result.checkpoint_path


def require_model(cfg: RunConfig, root: Path) -> RetrievalModel:
    checkpoint = model_dir(cfg, root) / "checkpoint.pt"
    if not checkpoint.exists():
        raise SuperfeatError(
            f"checkpoint missing: {checkpoint} (run 'train' first)")
    return load_checkpoint(checkpoint)


def cmd_fit_whitening(cfg: RunConfig, root: Path) -> Path:
    """Standalone whitening fit from an initialization pass; saved as npz."""
    from .encoder import ConvEncoder
    from .templates import TemplateBank
    from .training import _pixel_tensors, fit_model_whitening

    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    encoder = ConvEncoder(dim=cfg.encoder.dim, base_channels=cfg.encoder.base_channels,
                          min_side=cfg.encoder.min_side, seed=cfg.seed, dtype=dtype)
    bank = TemplateBank(feature_dim=cfg.encoder.dim, dim=cfg.templates.dim,
                        count=cfg.templates.count, iterations=cfg.templates.iterations,
                        update=cfg.templates.update, init_std=cfg.templates.init_std,
                        seed=cfg.seed + 1, dtype=dtype)
    model = RetrievalModel(encoder=encoder, bank=bank)
    train_set = dataset_for_split(cfg, "train")
    fit_model_whitening(model, _pixel_tensors(train_set, dtype), cfg.whitening.out_dim)
    directory = model_dir(cfg, root)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "whitening.npz"
    np.savez(path,
             template_mean=model.whitener.mean.numpy(),
             template_projection=model.whitener.projection.numpy(),
             local_mean=model.local_whitener.mean.numpy(),
             local_projection=model.local_whitener.projection.numpy())
    return path


def extract_selected(model: RetrievalModel, dataset, cfg: RunConfig):
    """Per-image multi-scale extraction + top-budget selection."""
    per_image, names = [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            image = dataset.image(i)
            try:
                sets = model.superfeatures_multiscale(image, cfg.retrieval.scales)
                selected = select_top_features(sets, cfg.retrieval.budget)
            except SuperfeatError as exc:
                log.warning("image %s skipped: %s", image.id, exc)
                continue
            if not selected:
                log.warning("image %s skipped: no usable features", image.id)
                continue
            per_image.append(np.stack([s.vector for s in selected]))
            names.append(image.id)
    return names, per_image


def cmd_fit_codebook(cfg: RunConfig, root: Path, force: bool = False) -> Path:
    """Train the visual-word codebook on training-split features."""
    directory = index_dir(cfg, root)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "codebook.npz"
    if path.exists() and not force:
        log.info("reusing cached codebook %s", path)
        return path
    model = require_model(cfg, root)
    train_set = dataset_for_split(cfg, "train")
    _, per_image = extract_selected(model, train_set, cfg)
    stacked = np.vstack(per_image)
    k = min(cfg.retrieval.codebook_size, stacked.shape[0])
    if k < cfg.retrieval.codebook_size:
        log.info("codebook size clamped to %d (only %d features)", k, stacked.shape[0])
    codebook = train_codebook(stacked, k, seed=cfg.seed,
                              iterations=cfg.retrieval.kmeans_iterations)
    np.savez(path, centroids=codebook.centroids)
    return path


def load_codebook(cfg: RunConfig, root: Path) -> Codebook:
    path = index_dir(cfg, root) / "codebook.npz"
    if not path.exists():
        raise SuperfeatError(f"codebook missing: {path} (run 'fit-codebook' first)")
    return Codebook(centroids=np.load(path)["centroids"])


def build_index_for_dataset(model: RetrievalModel, dataset, cfg: RunConfig,
                            codebook: Codebook) -> AsmkIndex:
    """Index every dataset image; per-image failures are logged and skipped."""
    names, per_image = extract_selected(model, dataset, cfg)
    if not names:
        raise IndexEmpty("no image could be indexed")
    items = [(name, aggregate_binarize(feats, codebook)[0])
             for name, feats in zip(names, per_image)]
    return build_signature_index(codebook, bits=cfg.whitening.out_dim, items=items,
                                 alpha=cfg.retrieval.selectivity_alpha,
                                 tau=cfg.retrieval.selectivity_threshold)


def cmd_index(cfg: RunConfig, root: Path, force: bool = False) -> Path:
    directory = index_dir(cfg, root)
    path = directory / "index.bin"
    if path.exists() and not force:
        log.info("reusing cached index %s", path)
        return path
    model = require_model(cfg, root)
    codebook = load_codebook(cfg, root)
    eval_set = dataset_for_split(cfg, "eval")
    index = build_index_for_dataset(model, eval_set, cfg, codebook)
    save_index(index, path)
    return path


def _query_signatures(model, dataset, cfg, codebook, queries=None):
    names, per_image = extract_selected(model, dataset, cfg)
    wanted = set(queries) if queries else None
    out = {}
    for name, feats in zip(names, per_image):
        if wanted is not None and name not in wanted:
            continue
        out[name] = aggregate_binarize(feats, codebook)[0]
    if wanted is not None:
        missing = wanted - set(out)
        if missing:
            raise SuperfeatError(f"unknown query ids: {sorted(missing)}")
    return out


def cmd_search(cfg: RunConfig, root: Path, queries=None, top_m=None) -> Path:
    """Rank the indexed corpus for each query image; writes rankings.csv."""
    model = require_model(cfg, root)
    codebook = load_codebook(cfg, root)
    index = load_index(index_dir(cfg, root) / "index.bin")
    eval_set = dataset_for_split(cfg, "eval")
    signatures = _query_signatures(model, eval_set, cfg, codebook, queries)
    rows = []
    for qid in signatures:
        for rank, (image_id, score) in enumerate(
                search_signatures(index, signatures[qid], top_m=top_m), start=1):
            rows.append((qid, rank, image_id, f"{score:.17g}"))
    directory = prepare_run(cfg, root)
    return report.write_csv(directory / "rankings.csv",
                            ["query_id", "rank", "image_id", "score"], rows)


def cmd_eval(cfg: RunConfig, root: Path) -> dict:
    """Leave-one-out mAP over the eval split using the built index."""
    model = require_model(cfg, root)
    codebook = load_codebook(cfg, root)
    index = load_index(index_dir(cfg, root) / "index.bin")
    eval_set = dataset_for_split(cfg, "eval")
    signatures = _query_signatures(model, eval_set, cfg, codebook)
    gt = class_ground_truth(eval_set)
    rankings = {}
    ap_rows = []
    from .evaluation import average_precision
    for qid, sigs in signatures.items():
        ranked = [img for img, _ in search_signatures(index, sigs)]
        rankings[qid] = ranked
        ap_rows.append((qid, average_precision(ranked, gt.relevant[qid],
                                               gt.ignored.get(qid, set()))))
    score = mean_average_precision(rankings, gt)
    _, avg_clusters = memory_footprint(index)
    directory = prepare_run(cfg, root)
    report.write_csv(directory / "eval.csv", ["query_id", "average_precision"],
                     [(q, f"{ap:.6f}") for q, ap in ap_rows])
    summary = {"map": score, "avg_clusters": avg_clusters,
               "queries": len(ap_rows), "indexed": index.image_count}
    (directory / "eval_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("mAP %.4f over %d queries", score, len(ap_rows))
    return summary


def budget_sweep(model: RetrievalModel, dataset, cfg: RunConfig, budgets,
                 codebook_k=None) -> list[tuple[int, float, float]]:
    """(budget, avg clusters, mAP) rows for a performance-vs-memory sweep."""
    rows = []
    for budget in budgets:
        result = evaluate_retrieval(
            model, dataset, scales=cfg.retrieval.scales, budget=budget,
            codebook_k=codebook_k or cfg.retrieval.codebook_size,
            kmeans_iterations=cfg.retrieval.kmeans_iterations,
            alpha=cfg.retrieval.selectivity_alpha,
            tau=cfg.retrieval.selectivity_threshold, seed=cfg.seed)
        rows.append((budget, result["avg_clusters"], result["map"]))
    return rows


def cmd_diagnose(cfg: RunConfig, root: Path) -> dict:
    """Analysis artifacts: correlation matrix, redundancy curves, per-scale
    stats, attention heatmaps, and the budget-vs-memory sweep."""
    model = require_model(cfg, root)
    eval_set = dataset_for_split(cfg, "eval")
    directory = prepare_run(cfg, root) / "diagnostics"
    directory.mkdir(exist_ok=True)
    outputs: dict = {}

    with torch.no_grad():
        # Attention correlation averaged over the corpus at scale 1.0.
        matrices = []
        for i in range(len(eval_set)):
            sfs = model.superfeatures(eval_set.image(i))
            matrices.append(attention_correlation(sfs.attention))
        mean_matrix = np.mean(matrices, axis=0)
        report.write_csv(directory / "attention_correlation.csv",
                         [f"id_{j}" for j in range(mean_matrix.shape[1])],
                         [[f"{v:.6f}" for v in row] for row in mean_matrix])
        report.save_correlation_figure(mean_matrix,
                                       directory / "attention_correlation.png")
        outputs["mean_offdiagonal"] = mean_offdiagonal(mean_matrix)

        # Redundancy: ordered features vs whitened local features.
        ks = cfg.diagnostics.redundancy_ks
        super_curve = np.zeros(len(ks))
        local_curve = np.zeros(len(ks))
        for i in range(len(eval_set)):
            image = eval_set.image(i)
            sfs = model.superfeatures(image)
            super_curve += redundancy_curve(sfs.features, ks)
            local = model.encoder.extract(image)
            whitened = model.local_whitener.apply(local.features)
            unit = whitened / whitened.norm(dim=-1, keepdim=True)
            local_curve += redundancy_curve(unit, ks)
        super_curve /= len(eval_set)
        local_curve /= len(eval_set)
        report.write_csv(directory / "redundancy.csv",
                         ["k", "superfeatures", "local_features"],
                         [(k, f"{s:.6f}", f"{l:.6f}")
                          for k, s, l in zip(ks, super_curve, local_curve)])
        report.save_redundancy_figure(
            ks, {"ordered features": super_curve, "local features": local_curve},
            directory / "redundancy.png")
        outputs["redundancy"] = {"ks": list(ks),
                                 "super": super_curve.tolist(),
                                 "local": local_curve.tolist()}

        # Per-scale selection statistics over the corpus.
        image = eval_set.image(0)
        sets = model.superfeatures_multiscale(image, cfg.retrieval.scales)
        selected = select_top_features(sets, cfg.retrieval.budget)
        counts = {s.scale: int(s.usable.sum()) for s in sets}
        stats = per_scale_stats(selected, [s.scale for s in sets], counts)
        report.write_csv(directory / "per_scale.csv",
                         ["scale", "selected_share", "retention_rate", "candidates"],
                         [(sc, f"{sh:.4f}", f"{rt:.4f}", int(ct))
                          for sc, sh, rt, ct in zip(stats.scales, stats.selected_share,
                                                    stats.retention_rate,
                                                    stats.candidate_counts)])
        report.save_per_scale_figure(stats, directory / "per_scale.png")

        # Attention heatmaps + cross-scale consistency for the first image.
        ids = [i for i in cfg.diagnostics.heatmap_ids if i < model.bank.count]
        paths, consistency_csv = report.export_attention_heatmaps(
            image, sets, ids, directory / "heatmaps")
        outputs["heatmaps"] = [str(p) for p in paths]
        outputs["scale_consistency_csv"] = str(consistency_csv)

        # Performance-vs-memory sweep (CSV + figure).
        rows = budget_sweep(model, eval_set, cfg, cfg.diagnostics.budget_sweep)
    report.write_csv(directory / "memory_sweep.csv",
                     ["budget", "avg_clusters", "map"],
                     [(b, f"{c:.6f}", f"{m:.6f}") for b, c, m in rows])
    report.save_memory_sweep_figure(rows, directory / "memory_sweep.png")
    outputs["memory_sweep"] = rows
    outputs["directory"] = str(directory)
    return outputs
