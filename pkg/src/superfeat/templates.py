"""Iterative template refinement over local features.

A bank of N learned templates is refined for T iterations against the local
features of an image.  Each iteration computes cross-attention between
projected features (keys/values) and projected templates (queries), where
compatibility scores are softmax-normalized across templates and then
l1-normalized across locations, so every attention map is a distribution
over the L image locations.  All parameters are shared across iterations;
the refined templates, whitened and l2-normalized, form an ordered feature
set whose row index is the feature ID.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .encoder import LocalFeatureSet, seed_parameters
from .errors import DegenerateColumn, ZeroFeatureWarning
from .whitening import WhiteningTransform

log = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12


@dataclass
class SuperFeatureSet:
    """Ordered N x out_dim unit-norm features from one image at one scale.

    strengths holds the pre-normalization magnitudes used for test-time
    selection; usable flags rows whose projected norm was effectively zero
    (kept as zero rows rather than NaN).
    """

    features: torch.Tensor   # N x out_dim, rows unit norm where usable
    strengths: torch.Tensor  # N
    attention: torch.Tensor  # L x N, final-iteration attention
    scale: float
    usable: torch.Tensor     # N bool
    spatial_shape: tuple[int, int] | None = None  # (W, H) of the grid

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def features_np(self):
        return self.features.detach().cpu().double().numpy()


def attention_from_scores(logits: torch.Tensor) -> torch.Tensor:
    """Two-step normalization of compatibility scores into attention maps.

    Rows (locations) are softmax-normalized across templates, then each
    column is l1-normalized across locations so it sums to one.  Raises
    DegenerateColumn when a column underflows to an exact zero sum.
    """
    rowwise = torch.softmax(logits, dim=-1)
    col_sums = rowwise.sum(dim=-2, keepdim=True)
    if (col_sums == 0).any():
        raise DegenerateColumn("attention column sum underflowed to zero")
    return rowwise / (col_sums + ZERO_NORM_EPS)


class TemplateBank(nn.Module):
    """Learned initial templates plus the shared refinement parameters.

    The key/value path shares one pre-projection layer norm over the input
    features; the query path has its own over the templates and is applied
    at every iteration, including to the initial templates.
    """

    def __init__(self, feature_dim: int, dim: int = 256, count: int = 32,
                 iterations: int = 3, update: str = "residual",
                 init_std: float = 0.02, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if update not in ("residual", "gated"):
            raise ValueError(f"unknown update rule '{update}'")
        self.feature_dim = feature_dim
        self.dim = dim
        self.count = count
        self.iterations = iterations
        self.update = update
        self.input_norm = nn.LayerNorm(feature_dim)
        self.query_norm = nn.LayerNorm(dim)
        self.key_proj = nn.Linear(feature_dim, dim)
        self.value_proj = nn.Linear(feature_dim, dim)
        self.query_proj = nn.Linear(dim, dim)
        self.mlp = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim // 2),
            nn.ReLU(),
            nn.Linear(dim // 2, dim),
        )
        if update == "gated":
            self.gate_input = nn.Linear(dim, dim)
            self.gate_state = nn.Linear(dim, dim)
        seed_parameters(self, seed)
        with torch.no_grad():
            gen = torch.Generator().manual_seed(seed + 1)
            q0 = torch.randn((count, dim), generator=gen, dtype=torch.float64)
        self.initial_templates = nn.Parameter(q0 * init_std)
        self.to(dtype)

    @staticmethod
    def _as_features(features) -> torch.Tensor:
        if isinstance(features, LocalFeatureSet):
            return features.features
        return features

    def attention_maps(self, features, templates: torch.Tensor) -> torch.Tensor:
        """Column-stochastic L x N attention between features and templates.

        Scores are scaled dot products of projected keys and queries,
        softmaxed across the N templates per location, then divided by the
        per-template column sums so each column is a distribution over
        locations.  Raises DegenerateColumn on an exact zero column sum.
        """
        u = self._as_features(features)
        keyed = self.key_proj(self.input_norm(u))
        queried = self.query_proj(self.query_norm(templates))
        logits = keyed @ queried.transpose(-2, -1) / math.sqrt(self.dim)
        return attention_from_scores(logits)

    def step(self, features, templates: torch.Tensor):
        """One refinement: attention-weighted value aggregation with a
        residual template connection, then a residual MLP."""
        u = self._as_features(features)
        alpha = self.attention_maps(u, templates)
        values = self.value_proj(self.input_norm(u))
        aggregated = alpha.transpose(-2, -1) @ values + templates
        return self.mlp(aggregated) + aggregated, alpha

    def step_gated(self, features, templates: torch.Tensor):
        """Ablation update: an update gate blends the previous templates
        with the attention aggregate instead of adding them."""
        u = self._as_features(features)
        alpha = self.attention_maps(u, templates)
        values = self.value_proj(self.input_norm(u))
        aggregated = alpha.transpose(-2, -1) @ values
        gate = torch.sigmoid(self.gate_input(aggregated) + self.gate_state(templates))
        blended = (1.0 - gate) * templates + gate * aggregated
        return self.mlp(blended) + blended, alpha

    def forward(self, features):
        """Run T shared-parameter refinement steps from the initial templates.

        Returns (raw N x d features, final-iteration attention).  Accepts
        (L, D) or batched (B, L, D) features.
        """
        u = self._as_features(features)
        templates = self.initial_templates
        if u.ndim == 3:
            templates = templates.unsqueeze(0).expand(u.shape[0], -1, -1)
        step = self.step_gated if self.update == "gated" else self.step
        alpha = None
        for t in range(self.iterations):
            try:
                templates, alpha = step(u, templates)
            except DegenerateColumn as exc:
                raise DegenerateColumn(f"iteration {t}: {exc}") from exc
        return templates, alpha


def postprocess_superfeatures(raw: torch.Tensor, whitener: WhiteningTransform,
                              alpha: torch.Tensor, scale: float = 1.0,
                              spatial_shape: tuple[int, int] | None = None) -> SuperFeatureSet:
    """Whiten and l2-normalize raw refined templates into an ordered set.

    Rows with projected norm below 1e-12 are flagged unusable and left as
    (near-)zero rows instead of dividing to NaN.
    """
    projected = whitener.apply(raw)
    strengths = projected.norm(dim=-1)
    usable = strengths >= ZERO_NORM_EPS
    if not bool(usable.all()):
        bad = (~usable).nonzero().flatten().tolist()
        log.warning("zero-norm features flagged unusable: ids %s", bad)
        warnings.warn(f"zero-norm feature ids {bad} flagged unusable",
                      ZeroFeatureWarning, stacklevel=2)
    denom = torch.where(usable, strengths, torch.ones_like(strengths))
    features = projected / denom.unsqueeze(-1)
    return SuperFeatureSet(features=features, strengths=strengths,
                           attention=alpha, scale=scale, usable=usable,
                           spatial_shape=spatial_shape)
