"""Ordered mid-level feature retrieval.

A trainable pipeline that refines learned templates against CNN local
features into an ordered set of compact image features, trains them with a
match-filtered contrastive loss plus an attention decorrelation loss, and
serves retrieval through a binary selective-match-kernel inverted file.
"""

from .config import RunConfig, load_config
from .encoder import ConvEncoder, ImageTensor, LocalFeatureSet
from .model import RetrievalModel
from .templates import SuperFeatureSet, TemplateBank, postprocess_superfeatures
from .whitening import WhiteningTransform, fit_whitening

__version__ = "0.1.0"

__all__ = [
    "ConvEncoder",
    "ImageTensor",
    "LocalFeatureSet",
    "RetrievalModel",
    "RunConfig",
    "SuperFeatureSet",
    "TemplateBank",
    "WhiteningTransform",
    "fit_whitening",
    "load_config",
    "postprocess_superfeatures",
    "__version__",
]
