"""Procedural matched-image dataset.

Each class is a textured scene (sinusoidal background gratings plus a few
colored shapes); each image of the class renders the same scene under a
seeded similarity transform and photometric jitter, so within-class pairs
are true matches.  Rendering is analytic per pixel, which makes it exactly
reproducible from the recorded parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .encoder import ImageTensor


@runtime_checkable
class ImageDataset(Protocol):
    """Minimal adapter interface: images with integer class labels."""

    def __len__(self) -> int: ...
    def image(self, index: int) -> ImageTensor: ...
    def label(self, index: int) -> int: ...


@dataclass
class SyntheticDataset:
    images: list[ImageTensor]
    labels: list[int]
    params: list[dict]
    seed: int
    image_size: int

    def __len__(self) -> int:
        return len(self.images)

    def image(self, index: int) -> ImageTensor:
        return self.images[index]

    def label(self, index: int) -> int:
        return self.labels[index]

    @property
    def class_count(self) -> int:
        return len(set(self.labels))

    def indices_by_class(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, lab in enumerate(self.labels):
            groups.setdefault(lab, []).append(i)
        return groups


@dataclass
class _Shape:
    kind: str                 # disc | box | ring
    center: np.ndarray
    size: float
    aspect: float
    angle: float
    color: np.ndarray
    stripe_freq: float        # 0 -> solid fill
    stripe_angle: float
    stripe_color: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _sample_scene(rng: np.random.Generator) -> dict:
    base = rng.uniform(0.25, 0.75, size=3)
    gratings = []
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 4.0)
        gratings.append({
            "dir": np.array([np.cos(theta), np.sin(theta)]) * freq,
            "phase": rng.uniform(0, 2 * np.pi),
            "amp": rng.uniform(0.04, 0.12, size=3),
        })
    shapes = []
    for _ in range(int(rng.integers(3, 6))):
        striped = rng.random() < 0.5
        shapes.append(_Shape(
            kind=["disc", "box", "ring"][int(rng.integers(0, 3))],
            center=rng.uniform(0.18, 0.82, size=2),
            size=rng.uniform(0.08, 0.20),
            aspect=rng.uniform(0.5, 1.0),
            angle=rng.uniform(0, np.pi),
            color=rng.uniform(0.0, 1.0, size=3),
            stripe_freq=rng.uniform(4.0, 9.0) if striped else 0.0,
            stripe_angle=rng.uniform(0, np.pi),
            stripe_color=rng.uniform(0.0, 1.0, size=3),
        ))
    return {"base": base, "gratings": gratings, "shapes": shapes}


def _sample_perturbation(rng: np.random.Generator) -> dict:
    return {
        "rotation": float(rng.uniform(-0.25, 0.25)),
        "log_scale": float(rng.uniform(-0.15, 0.15)),
        "shift": rng.uniform(-0.08, 0.08, size=2).tolist(),
        "gain": float(rng.uniform(0.85, 1.15)),
        "bias": float(rng.uniform(-0.06, 0.06)),
    }


def _render(scene: dict, perturb: dict, size: int) -> np.ndarray:
    ys, xs = np.meshgrid(
        (np.arange(size) + 0.5) / size,
        (np.arange(size) + 0.5) / size,
        indexing="ij",
    )
    # Inverse similarity transform: pixel grid -> scene coordinates.
    rot = perturb["rotation"]
    scale = float(np.exp(perturb["log_scale"]))
    shift = np.asarray(perturb["shift"])
    cx = xs - 0.5 - shift[0]
    cy = ys - 0.5 - shift[1]
    cos_r, sin_r = np.cos(-rot), np.sin(-rot)
    sx = (cos_r * cx - sin_r * cy) / scale + 0.5
    sy = (sin_r * cx + cos_r * cy) / scale + 0.5

    img = np.empty((size, size, 3))
    img[:] = scene["base"]
    for g in scene["gratings"]:
        wave = np.sin(2 * np.pi * (g["dir"][0] * sx + g["dir"][1] * sy) + g["phase"])
        img += wave[..., None] * g["amp"]

    edge = 0.02  # soft edge width in scene units, ~1.3 px at size 64
    for shape in scene["shapes"]:
        dx, dy = sx - shape.center[0], sy - shape.center[1]
        if shape.kind == "disc":
            dist = np.hypot(dx, dy) - shape.size
        elif shape.kind == "ring":
            dist = np.abs(np.hypot(dx, dy) - shape.size) - 0.35 * shape.size
        else:  # box
            ca, sa = np.cos(-shape.angle), np.sin(-shape.angle)
            lx = ca * dx - sa * dy
            ly = sa * dx + ca * dy
            dist = np.maximum(np.abs(lx) - shape.size,
                              np.abs(ly) - shape.size * shape.aspect)
        coverage = np.clip(0.5 - dist / edge, 0.0, 1.0)
        fill = np.broadcast_to(shape.color, img.shape).copy()
        if shape.stripe_freq > 0:
            axis = (np.cos(shape.stripe_angle) * sx
                    + np.sin(shape.stripe_angle) * sy)
            mix = 0.5 + 0.5 * np.sin(2 * np.pi * shape.stripe_freq * axis)
            fill = (1 - mix[..., None]) * shape.color + mix[..., None] * shape.stripe_color
        img = (1 - coverage[..., None]) * img + coverage[..., None] * fill

    img = perturb["gain"] * img + perturb["bias"]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(num_classes: int, images_per_class: int,
                               seed: int, image_size: int = 64) -> SyntheticDataset:
    """Render num_classes scenes with images_per_class seeded variants each."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if images_per_class < 2:
        raise ValueError("need at least two images per class")
    rng = np.random.default_rng(seed)
    images, labels, params = [], [], []
    for cls in range(num_classes):
        scene = _sample_scene(rng)
        for idx in range(images_per_class):
            perturb = _sample_perturbation(rng)
            pixels = _render(scene, perturb, image_size)
            images.append(ImageTensor(
                pixels=pixels, id=f"s{seed}_c{cls:03d}_i{idx:02d}"))
            labels.append(cls)
            params.append({"class": cls, "variant": idx, **perturb})
    return SyntheticDataset(images=images, labels=labels, params=params,
                            seed=seed, image_size=image_size)


def flip_horizontal(image: ImageTensor) -> ImageTensor:
    """Mirror an image left-right (the only augmentation used in training)."""
    return ImageTensor(pixels=np.ascontiguousarray(image.pixels[:, ::-1, :]),
                       id=image.id + "|flip")
