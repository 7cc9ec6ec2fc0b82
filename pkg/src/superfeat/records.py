"""Binary export of ordered feature sets.

File layout: magic, version, record count; then per record the feature
count N, feature dim, attention location count L, scale, strengths,
features (row-major), and attention values (row-major).  All floats are
little-endian float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .templates import SuperFeatureSet

MAGIC = b"SFRC"
VERSION = 1


def write_superfeature_records(path, sets: list[SuperFeatureSet]):
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sets)))
        for sfs in sets:
            feats = sfs.features_np()
            strengths = sfs.strengths.detach().cpu().double().numpy()
            alpha = sfs.attention.detach().cpu().double().numpy()
            n, dim = feats.shape
            fh.write(struct.pack("<IIId", n, dim, alpha.shape[0], float(sfs.scale)))
            fh.write(strengths.astype("<f8").tobytes())
            fh.write(feats.astype("<f8").tobytes())
            fh.write(alpha.astype("<f8").tobytes())


def read_superfeature_records(path) -> list[SuperFeatureSet]:
    with open(Path(path), "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a feature record file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported record version {version}")
        sets = []
        for _ in range(count):
            n, dim, loc, scale = struct.unpack("<IIId", fh.read(20))
            strengths = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
            feats = np.frombuffer(fh.read(8 * n * dim),
                                  dtype="<f8").reshape(n, dim).copy()
            alpha = np.frombuffer(fh.read(8 * loc * n),
                                  dtype="<f8").reshape(loc, n).copy()
            sets.append(SuperFeatureSet(
                features=torch.from_numpy(feats),
                strengths=torch.from_numpy(strengths),
                attention=torch.from_numpy(alpha),
                scale=scale,
                usable=torch.from_numpy(strengths >= 1e-12)))
        return sets
