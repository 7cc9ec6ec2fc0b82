import numpy as np
import pytest
import torch

from superfeat.encoder import ImageTensor
from superfeat.templates import SuperFeatureSet

DATA_DIR = __import__("pathlib").Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _single_thread():
    """Pin torch to one thread so float reductions are reproducible."""
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(old)


def random_image(seed: int = 0, size: int = 64) -> ImageTensor:
    rng = np.random.default_rng(seed)
    return ImageTensor(pixels=rng.random((size, size, 3)), id=f"img{seed}")


def make_feature_set(rows, scale: float = 1.0, strengths=None,
                     attention=None, usable=None) -> SuperFeatureSet:
    """Unit-normalize rows into a SuperFeatureSet for matcher/loss tests."""
    f = torch.as_tensor(np.asarray(rows, dtype=np.float64))
    f = f / f.norm(dim=1, keepdim=True)
    n = f.shape[0]
    if strengths is None:
        strengths = torch.ones(n, dtype=torch.float64)
    if attention is None:
        attention = torch.full((4, n), 0.25, dtype=torch.float64)
    if usable is None:
        usable = torch.ones(n, dtype=torch.bool)
    return SuperFeatureSet(features=f, strengths=strengths, attention=attention,
                           scale=scale, usable=usable)


def random_unit_rows(rng, n, dim):
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
