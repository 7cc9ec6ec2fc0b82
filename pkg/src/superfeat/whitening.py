"""PCA whitening for descriptor post-processing.

Fit once on a feature sample, then keep frozen: the transform subtracts the
sample mean and projects onto the leading eigenvectors scaled by inverse
square-root eigenvalues, so the fit sample maps to (approximately) unit
covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import RankDeficient


@dataclass
class WhiteningTransform:
    """Frozen affine map x -> projection @ (x - mean), reducing to out_dim."""

    mean: torch.Tensor        # (d,)
    projection: torch.Tensor  # (out_dim, d)

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """Whiten rows of x (supports leading batch dimensions)."""
        mean = self.mean.to(x.dtype)
        proj = self.projection.to(x.dtype)
        return (x - mean) @ proj.T

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        mean = self.mean.numpy()
        proj = self.projection.numpy()
        return (np.asarray(x, dtype=np.float64) - mean) @ proj.T

    def state_dict(self) -> dict:
        return {"mean": self.mean, "projection": self.projection}

    @classmethod
    def from_state(cls, state: dict) -> "WhiteningTransform":
        return cls(mean=state["mean"].double(), projection=state["projection"].double())

    @classmethod
    def identity(cls, dim: int) -> "WhiteningTransform":
        """Pass-through transform, mainly for toy configurations."""
        return cls(mean=torch.zeros(dim, dtype=torch.float64),
                   projection=torch.eye(dim, dtype=torch.float64))


def fit_whitening(sample, out_dim: int = 128,
                  rank_rtol: float = 1e-12) -> WhiteningTransform:
    """Fit a PCA-whitening transform on an M x d sample.

    Raises RankDeficient when the covariance spectrum cannot support
    out_dim whitened directions.
    """
    x = np.asarray(sample.detach().cpu().numpy() if isinstance(sample, torch.Tensor)
                   else sample, dtype=np.float64)
    m, d = x.shape
    if out_dim > d:
        raise RankDeficient(f"out_dim {out_dim} exceeds feature dim {d}")
    if m < 2:
        raise RankDeficient("need at least two samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (m - 1)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0 or evals[out_dim - 1] <= rank_rtol * evals[0]:
        raise RankDeficient(
            f"covariance rank below {out_dim}: eigenvalue {out_dim - 1} is "
            f"{evals[out_dim - 1]:.3e} against leading {evals[0]:.3e}")
    projection = evecs[:, :out_dim].T / np.sqrt(evals[:out_dim])[:, None]
    # PCA-whitening property: rows orthonormal under the data covariance.
    gram = projection @ cov @ projection.T
    err = np.abs(gram - np.eye(out_dim)).max()
    if err > 1e-4:
        raise RankDeficient(f"whitening check failed: |PCP' - I| = {err:.3e}")
    return WhiteningTransform(mean=torch.from_numpy(mean),
                              projection=torch.from_numpy(projection))
