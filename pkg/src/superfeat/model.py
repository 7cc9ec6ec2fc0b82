"""The full extraction model: encoder, template bank, frozen whiteners."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoder import ConvEncoder, ImageTensor
from .matching import global_descriptor
from .templates import SuperFeatureSet, TemplateBank, postprocess_superfeatures
from .whitening import WhiteningTransform


@dataclass
class RetrievalModel:
    encoder: ConvEncoder
    bank: TemplateBank
    whitener: WhiteningTransform | None = None        # template path, d -> out
    local_whitener: WhiteningTransform | None = None  # local path, D -> out

    def superfeatures(self, image: ImageTensor, scale: float = 1.0) -> SuperFeatureSet:
        """Ordered feature set of one image at one scale."""
        local = self.encoder.extract(image, scale)
        raw, alpha = self.bank(local)
        return postprocess_superfeatures(raw, self.whitener, alpha, scale=scale,
                                         spatial_shape=local.spatial_shape)

    def superfeatures_multiscale(self, image: ImageTensor,
                                 scales) -> list[SuperFeatureSet]:
        """One feature set per usable scale, too-small scales skipped."""
        sets = []
        for local in self.encoder.extract_multiscale(image, scales):
            raw, alpha = self.bank(local)
            sets.append(postprocess_superfeatures(raw, self.whitener, alpha,
                                                  scale=local.scale,
                                                  spatial_shape=local.spatial_shape))
        return sets

    def image_descriptor(self, image: ImageTensor, scale: float = 1.0) -> torch.Tensor:
        """Norm-weighted global descriptor of one image."""
        local = self.encoder.extract(image, scale)
        return global_descriptor(local, self.local_whitener)

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.bank.parameters()

    def train(self, mode: bool = True):
        self.encoder.train(mode)
        self.bank.train(mode)
        return self

    def eval(self):
        return self.train(False)
