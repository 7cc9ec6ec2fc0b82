"""Retrieval evaluation and analysis instruments.

Mean average precision over a labeled corpus, attention-map correlation
matrices, feature redundancy curves, per-scale selection statistics, and a
leave-one-out retrieval benchmark over a labeled dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .asmk import (aggregate_binarize, build_signature_index, search_signatures,
                   select_top_features, train_codebook)
from .errors import KTooLarge, NoFeatures, NoRelevant, ZeroAttentionColumn

log = logging.getLogger(__name__)


@dataclass
class RetrievalGroundTruth:
    """Per-query relevant and ignored image id sets."""

    relevant: dict[str, set]
    ignored: dict[str, set]

    def validate(self):
        for qid, rel in self.relevant.items():
            ign = self.ignored.get(qid, set())
            if rel & ign:
                raise ValueError(f"query {qid}: relevant and ignored overlap")
            if qid in rel:
                raise ValueError(f"query {qid}: query inside its own relevant set")


def average_precision(ranking, relevant: set, ignored: set = frozenset()) -> float:
    """Textbook AP: mean of precision at each relevant hit, over |relevant|.

    Ignored ids are removed from the ranking before scoring; relevant items
    missing from the ranking contribute zero.
    """
    if not relevant:
        raise NoRelevant("query has no relevant images")
    hits = 0
    precision_sum = 0.0
    rank = 0
    for image_id in ranking:
        if image_id in ignored:
            continue
        rank += 1
        if image_id in relevant:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / len(relevant)


def mean_average_precision(rankings: dict, gt: RetrievalGroundTruth) -> float:
    """Mean over queries of average precision."""
    aps = []
    for qid, ranking in rankings.items():
        relevant = gt.relevant.get(qid)
        if not relevant:
            raise NoRelevant(f"query {qid} has no relevant images")
        aps.append(average_precision(ranking, relevant, gt.ignored.get(qid, set())))
    return float(np.mean(aps))


def attention_correlation(alpha) -> np.ndarray:
    """N x N cosine similarity of attention columns; exact unit diagonal."""
    a = alpha.detach().cpu().double().numpy() if isinstance(alpha, torch.Tensor) \
        else np.asarray(alpha, dtype=np.float64)
    norms = np.linalg.norm(a, axis=0)
    if norms.min() < 1e-12:
        raise ZeroAttentionColumn("attention column with zero norm")
    unit = a / norms
    gram = unit.T @ unit
    upper = np.triu(gram, k=1)
    return upper + upper.T + np.eye(a.shape[1])


def mean_offdiagonal(matrix: np.ndarray) -> float:
    n = matrix.shape[0]
    return float((matrix.sum() - np.trace(matrix)) / (n * (n - 1)))


def redundancy_curve(features, ks) -> np.ndarray:
    """Average cosine similarity of each feature to its K most similar
    same-image features, for each K, assuming unit-norm rows."""
    f = features.detach().cpu().double().numpy() if isinstance(features, torch.Tensor) \
        else np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if max(ks) >= n:
        raise KTooLarge(f"K={max(ks)} needs at least {max(ks) + 1} features, got {n}")
    sims = f @ f.T
    curve = np.zeros(len(ks))
    for i in range(n):
        row = np.delete(sims[i], i)
        row.sort()
        row = row[::-1]
        prefix = np.cumsum(row)
        for j, k in enumerate(ks):
            curve[j] += prefix[k - 1] / k
    return curve / n


@dataclass
class PerScaleStats:
    scales: list[float]
    selected_share: np.ndarray    # percent of the budget from each scale
    retention_rate: np.ndarray    # percent of each scale's candidates kept
    candidate_counts: np.ndarray  # raw candidates per scale


def per_scale_stats(selected, scales, candidate_counts: dict) -> PerScaleStats:
    """Selection statistics per scale for a top-budget selection result."""
    total = len(selected)
    share, retention, counts = [], [], []
    for scale in scales:
        kept = sum(1 for item in selected if item.scale == scale)
        cand = candidate_counts.get(scale, 0)
        share.append(100.0 * kept / total if total else 0.0)
        retention.append(100.0 * kept / cand if cand else 0.0)
        counts.append(cand)
    return PerScaleStats(scales=list(scales),
                         selected_share=np.array(share),
                         retention_rate=np.array(retention),
                         candidate_counts=np.array(counts))


def class_ground_truth(dataset) -> RetrievalGroundTruth:
    """Per-class relevance: every same-label image is relevant, the query
    itself is ignored."""
    relevant, ignored = {}, {}
    by_class = dataset.indices_by_class()
    for i in range(len(dataset)):
        qid = dataset.image(i).id
        mates = {dataset.image(j).id for j in by_class[dataset.label(i)] if j != i}
        relevant[qid] = mates
        ignored[qid] = {qid}
    gt = RetrievalGroundTruth(relevant=relevant, ignored=ignored)
    gt.validate()
    return gt


def evaluate_retrieval(model, dataset, scales, budget: int, codebook_k: int,
                       kmeans_iterations: int = 25, alpha: float = 3.0,
                       tau: float = 0.0, seed: int = 0,
                       codebook=None) -> dict:
    """Leave-one-out retrieval benchmark over a labeled dataset.

    Indexes every image via multi-scale extraction, top-budget selection and
    binary aggregation, queries each image against the index (self ignored),
    and reports mAP plus the average non-empty cluster count.  The codebook
    is trained on the indexed features unless one is supplied.
    """
    per_image, names = [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            image = dataset.image(i)
            sets = model.superfeatures_multiscale(image, scales)
            selected = select_top_features(sets, budget)
            if not selected:
                log.warning("image %s skipped: no usable features", image.id)
                continue
            per_image.append(np.stack([s.vector for s in selected]))
            names.append(image.id)
    if not per_image:
        raise NoFeatures("no image produced usable features")
    if codebook is None:
        stacked = np.vstack(per_image)
        k = min(codebook_k, stacked.shape[0])
        if k < codebook_k:
            log.info("codebook size clamped to %d (only %d features)", k,
                     stacked.shape[0])
        codebook = train_codebook(stacked, k, seed=seed,
                                  iterations=kmeans_iterations)
    items, sig_by_name = [], {}
    for name, feats in zip(names, per_image):
        signatures, _ = aggregate_binarize(feats, codebook)
        items.append((name, signatures))
        sig_by_name[name] = signatures
    index = build_signature_index(codebook, bits=per_image[0].shape[1],
                                  items=items, alpha=alpha, tau=tau)
    rankings = {name: [img for img, _ in search_signatures(index, sigs)]
                for name, sigs in sig_by_name.items()}
    gt = class_ground_truth(dataset)
    rankings = {qid: rankings[qid] for qid in rankings if qid in gt.relevant}
    score = mean_average_precision(rankings, gt)
    return {
        "map": score,
        "avg_clusters": float(index.cluster_counts.mean()),
        "index": index,
        "codebook": codebook,
        "rankings": rankings,
        "ground_truth": gt,
    }
