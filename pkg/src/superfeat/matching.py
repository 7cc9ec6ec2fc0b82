"""Feature matching and training losses.

Covers the norm-weighted global descriptor and its contrastive loss, the
constraint-filtered selection of matching ordered features across a positive
image pair, the feature-level contrastive loss on those matches, and the
attention decorrelation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import LossConfig, MatchConfig
from .errors import ZeroAttentionColumn, ZeroDescriptor
from .templates import SuperFeatureSet
from .whitening import WhiteningTransform


@dataclass
class MatchPair:
    anchor_id: int
    partner_id: int
    distance: float


@dataclass
class MatchSet:
    """Admitted feature pairs for one positive image pair.

    With the same-ID constraint on, anchor_id == partner_id for every pair;
    anchor ids are unique either way because each anchor feature proposes at
    most one candidate.
    """

    pairs: list[MatchPair] = field(default_factory=list)
    source: tuple[str, str] = ("", "")

    @property
    def ids(self) -> list[int]:
        return [p.anchor_id for p in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


def global_descriptor(features, whitener: WhiteningTransform) -> torch.Tensor:
    """Norm-weighted sum of whitened local features, l2-normalized.

    Each local feature contributes its whitened projection weighted by its
    own (pre-whitening) l2 norm.
    """
    u = features.features if hasattr(features, "features") else features
    if u.shape[0] == 0:
        raise ZeroDescriptor("empty local feature set")
    weights = u.norm(dim=-1, keepdim=True)
    pooled = (weights * whitener.apply(u)).sum(dim=-2)
    norm = pooled.norm(dim=-1)
    if float(norm.detach().min() if norm.ndim else norm.detach()) < 1e-12:
        raise ZeroDescriptor("aggregated descriptor has zero norm")
    return pooled / norm.unsqueeze(-1) if norm.ndim else pooled / norm


def global_contrastive_loss(anchor: torch.Tensor, positive: torch.Tensor,
                            negatives, cfg: LossConfig) -> torch.Tensor:
    """Squared distance to the positive plus hinge terms on the negatives."""
    loss = (anchor - positive).pow(2).sum()
    for neg in negatives:
        margin_term = cfg.margin_global - (anchor - neg).pow(2).sum()
        loss = loss + torch.clamp(margin_term, min=0.0)
    return loss


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances; same summation order as a per-pair loop."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(d2)


def select_matches(set_a: SuperFeatureSet, set_b: SuperFeatureSet,
                   cfg: LossConfig, constraints: MatchConfig,
                   source: tuple[str, str] = ("", "")) -> MatchSet:
    """Select eligible feature pairs between two ordered sets.

    Every usable anchor feature proposes its nearest usable neighbor in the
    other set; the pair is admitted only if all enabled constraints pass:

    - reciprocal: the anchor is also the partner's nearest neighbor in the
      anchor set;
    - ratio: the match distance is sufficiently separated from the distance
      between the partner and its second-best anchor-set neighbor
      ("standard-lowe": dist <= tau * second; "as-printed": dist >= tau *
      second, which keeps ambiguous matches and is exposed for audit only);
    - same_id: anchor and partner occupy the same row of their sets.

    Selection is non-differentiable; exact distance ties resolve to the
    lowest index.
    """
    a = set_a.features_np()
    b = set_b.features_np()
    usable_a = set_a.usable.detach().cpu().numpy().astype(bool)
    usable_b = set_b.usable.detach().cpu().numpy().astype(bool)
    matches = MatchSet(source=source)
    if not usable_a.any() or not usable_b.any():
        return matches
    dist = _pairwise_distances(a, b)
    dist[~usable_a, :] = np.inf
    dist[:, ~usable_b] = np.inf
    for i in np.flatnonzero(usable_a):
        j = int(np.argmin(dist[i]))
        if constraints.reciprocal and int(np.argmin(dist[:, j])) != i:
            continue
        if constraints.ratio:
            column = dist[:, j].copy()
            column[i] = np.inf
            second = column.min()
            if np.isfinite(second):
                if cfg.ratio_direction == "as-printed":
                    admitted = dist[i, j] >= cfg.ratio_tau * second
                else:
                    admitted = dist[i, j] <= cfg.ratio_tau * second
                if not admitted:
                    continue
        if constraints.same_id and i != j:
            continue
        matches.pairs.append(MatchPair(anchor_id=int(i), partner_id=j,
                                       distance=float(dist[i, j])))
    return matches


def superfeature_contrastive_loss(matches: MatchSet, set_a: SuperFeatureSet,
                                  set_b: SuperFeatureSet,
                                  negatives: list[SuperFeatureSet],
                                  cfg: LossConfig) -> torch.Tensor:
    """Contrastive margin loss summed over admitted pairs.

    For each pair, the squared anchor-partner distance plus hinge terms
    against the same-ID feature of every negative image; negatives whose
    same-ID feature is unusable contribute nothing.
    """
    device = set_a.features.device
    dtype = set_a.features.dtype
    if len(matches) == 0:
        return torch.zeros((), device=device, dtype=dtype)
    aidx = torch.tensor([p.anchor_id for p in matches.pairs], device=device)
    pidx = torch.tensor([p.partner_id for p in matches.pairs], device=device)
    anchors = set_a.features[aidx]
    partners = set_b.features[pidx]
    loss = (anchors - partners).pow(2).sum(dim=-1).sum()
    for neg in negatives:
        neg_rows = neg.features[aidx]
        hinge = cfg.margin_super - (anchors - neg_rows).pow(2).sum(dim=-1)
        mask = neg.usable[aidx].to(dtype)
        loss = loss + (torch.clamp(hinge, min=0.0) * mask).sum()
    return loss


def attention_decorrelation_loss(alpha: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity over ordered off-diagonal column pairs."""
    n = alpha.shape[-1]
    if n < 2:
        raise ValueError("need at least two attention columns")
    norms = alpha.norm(dim=-2)
    if float(norms.detach().min()) < 1e-12:
        raise ZeroAttentionColumn("attention column with zero norm")
    unit = alpha / norms.unsqueeze(-2)
    gram = unit.transpose(-2, -1) @ unit
    off = gram.sum(dim=(-2, -1)) - gram.diagonal(dim1=-2, dim2=-1).sum(-1)
    return off / (n * (n - 1))


@dataclass
class TupleFeatures:
    """Everything the losses need for one training tuple."""

    anchor: SuperFeatureSet
    positive: SuperFeatureSet
    negatives: list[SuperFeatureSet]
    anchor_global: torch.Tensor | None = None
    positive_global: torch.Tensor | None = None
    negative_globals: list[torch.Tensor] | None = None
    source: tuple[str, str] = ("", "")


def total_loss(batch: list[TupleFeatures], cfg: LossConfig,
               constraints: MatchConfig):
    """Weighted training loss averaged over a batch of tuples.

    Returns (total, components, matchsets) where components holds the
    weighted per-component means that sum to the total, and matchsets the
    per-tuple selections used by the feature-level loss.
    """
    ref = batch[0].anchor.features
    zero = torch.zeros((), device=ref.device, dtype=ref.dtype)
    parts = {"global": zero.clone(), "super": zero.clone(), "attn": zero.clone()}
    matchsets = []
    for item in batch:
        matches = select_matches(item.anchor, item.positive, cfg, constraints,
                                 source=item.source)
        matchsets.append(matches)
        if cfg.use_super:
            parts["super"] = parts["super"] + superfeature_contrastive_loss(
                matches, item.anchor, item.positive, item.negatives, cfg)
        if cfg.use_attn:
            images = [item.anchor, item.positive, *item.negatives]
            attn = sum(attention_decorrelation_loss(s.attention) for s in images)
            parts["attn"] = parts["attn"] + attn / len(images)
        if cfg.use_global:
            parts["global"] = parts["global"] + global_contrastive_loss(
                item.anchor_global, item.positive_global,
                item.negative_globals, cfg)
    count = len(batch)
    components = {
        "global": parts["global"] / count if cfg.use_global else zero,
        "super": cfg.weight_super * parts["super"] / count if cfg.use_super else zero,
        "attn": cfg.weight_attn * parts["attn"] / count if cfg.use_attn else zero,
    }
    total = components["global"] + components["super"] + components["attn"]
    return total, components, matchsets
