"""Tuple-based contrastive training with per-epoch hard-negative mining.

An epoch samples anchor/positive pairs within classes, attaches each
anchor's mined hard negatives, and optimizes the configured loss mix with
an adaptive-moment optimizer whose step decays per epoch.  Whitening is
fit once from an initialization pass and kept frozen.  Everything is
seeded; rerunning a config reproduces the metric log exactly.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import RunConfig
from .encoder import ConvEncoder
from .errors import DivergenceDetected, PoolTooSmall
from .evaluation import evaluate_retrieval
from .matching import TupleFeatures, global_descriptor, select_matches, total_loss
from .model import RetrievalModel
from .synthetic import generate_synthetic_dataset
from .templates import TemplateBank, postprocess_superfeatures
from .whitening import fit_whitening

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 101


@dataclass
class TrainingTuple:
    anchor: int
    positive: int
    negatives: list[int]
    flips: list[bool]  # one per image: anchor, positive, then negatives


@dataclass
class TrainResult:
    model: RetrievalModel
    checkpoint_path: Path
    best_checkpoint_path: Path | None
    metrics_path: Path
    metrics: list[dict]


def mine_hard_negatives(descriptors, labels, per_tuple: int) -> list[list[int]]:
    """For each pool entry, the per_tuple nearest entries with another label.

    Distances are Euclidean between (unit-norm) global descriptors; exact
    ties resolve to the lower index.
    """
    d = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    assignments = []
    for i in range(d.shape[0]):
        valid = np.flatnonzero(labels != labels[i])
        if valid.size < per_tuple:
            raise PoolTooSmall(
                f"anchor {i}: {valid.size} candidates < {per_tuple} requested")
        dist = np.sqrt(((d[valid] - d[i]) ** 2).sum(axis=1))
        order = np.argsort(dist, kind="stable")[:per_tuple]
        assignments.append([int(v) for v in valid[order]])
    return assignments


def match_ratio(records) -> float | None:
    """Fraction of all selected matches that came from the positive pair.

    records holds (positive_matches, negative_matches) per tuple; returns
    None when no matches were selected at all.
    """
    pos = sum(r[0] for r in records)
    neg = sum(r[1] for r in records)
    if pos + neg == 0:
        return None
    return pos / (pos + neg)


def per_id_match_histogram(id_counts, num_tuples: int):
    """Percentage of tuples in which each feature ID was matched."""
    counts = np.asarray(id_counts, dtype=np.float64)
    percent = 100.0 * counts / max(1, num_tuples)
    summary = {"min": float(percent.min()), "mean": float(percent.mean()),
               "std": float(percent.std())}
    return percent, summary


def compute_global_descriptors(model: RetrievalModel, pixel_stack: torch.Tensor):
    """Batched norm-weighted descriptors for a stack of same-size images."""
    with torch.no_grad():
        rows, _ = model.encoder(pixel_stack)
        return global_descriptor(rows, model.local_whitener)


def _pixel_tensors(dataset, dtype: torch.dtype) -> torch.Tensor:
    """All dataset images as a (M, 3, H, W) stack, plus flipped copies."""
    plain = torch.stack([
        torch.from_numpy(dataset.image(i).pixels).permute(2, 0, 1).to(dtype)
        for i in range(len(dataset))])
    return torch.cat([plain, torch.flip(plain, dims=[3])])


def build_epoch_tuples(dataset, assignments, cfg: RunConfig, epoch: int) -> list[TrainingTuple]:
    """Seeded anchor/positive/negative sampling for one epoch."""
    rng = np.random.default_rng((cfg.seed, epoch, 7919))
    by_class = dataset.indices_by_class()
    count = cfg.train.batches_per_epoch * cfg.train.tuples_per_batch
    images_per_tuple = 2 + cfg.train.negatives
    tuples = []
    for _ in range(count):
        anchor = int(rng.integers(len(dataset)))
        mates = [i for i in by_class[dataset.label(anchor)] if i != anchor]
        positive = mates[int(rng.integers(len(mates)))]
        if cfg.train.flip_augment:
            flips = (rng.random(images_per_tuple) < 0.5).tolist()
        else:
            flips = [False] * images_per_tuple
        tuples.append(TrainingTuple(anchor=anchor, positive=positive,
                                    negatives=assignments[anchor], flips=flips))
    return tuples


def forward_tuples(model: RetrievalModel, pixels: torch.Tensor,
                   batch: list[TrainingTuple], dataset_size: int,
                   need_global: bool) -> list[TupleFeatures]:
    """One batched forward pass over every image of a batch of tuples."""
    flat = []
    for item in batch:
        members = [item.anchor, item.positive, *item.negatives]
        flat.extend(m + (dataset_size if f else 0)
                    for m, f in zip(members, item.flips))
    stack = pixels[flat]
    rows, _ = model.encoder(stack)
    raw, alpha = model.bank(rows)
    globals_ = global_descriptor(rows, model.local_whitener) if need_global else None

    per_tuple = 2 + len(batch[0].negatives)
    out = []
    for t, item in enumerate(batch):
        base = t * per_tuple
        sets = [postprocess_superfeatures(raw[base + i], model.whitener,
                                          alpha[base + i])
                for i in range(per_tuple)]
        gl = globals_[base:base + per_tuple] if need_global else None
        out.append(TupleFeatures(
            anchor=sets[0], positive=sets[1], negatives=sets[2:],
            anchor_global=gl[0] if need_global else None,
            positive_global=gl[1] if need_global else None,
            negative_globals=list(gl[2:]) if need_global else None,
            source=(str(item.anchor), str(item.positive))))
    return out


def fit_model_whitening(model: RetrievalModel, pixels: torch.Tensor,
                        out_dim: int, batch: int = 16):
    """Initialization pass: fit the frozen local and template whiteners."""
    locals_, raws = [], []
    count = pixels.shape[0] // 2  # unflipped images only
    with torch.no_grad():
        for start in range(0, count, batch):
            rows, _ = model.encoder(pixels[start:start + batch])
            raw, _ = model.bank(rows)
            locals_.append(rows.reshape(-1, rows.shape[-1]))
            raws.append(raw.reshape(-1, raw.shape[-1]))
    model.local_whitener = fit_whitening(torch.cat(locals_), out_dim)
    model.whitener = fit_whitening(torch.cat(raws), out_dim)


def train(cfg: RunConfig, run_dir, train_set=None, val_set=None) -> TrainResult:
    """Run the full training schedule and write checkpoints + a JSONL log."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
    if train_set is None:
        train_set = generate_synthetic_dataset(
            cfg.data.train_classes, cfg.data.train_images_per_class,
            seed=cfg.seed, image_size=cfg.data.image_size)
    if val_set is None:
        val_set = generate_synthetic_dataset(
            cfg.data.val_classes, cfg.data.val_images_per_class,
            seed=cfg.seed + VAL_SEED_OFFSET, image_size=cfg.data.image_size)

    encoder = ConvEncoder(dim=cfg.encoder.dim, base_channels=cfg.encoder.base_channels,
                          min_side=cfg.encoder.min_side, seed=cfg.seed, dtype=dtype)
    bank = TemplateBank(feature_dim=cfg.encoder.dim, dim=cfg.templates.dim,
                        count=cfg.templates.count, iterations=cfg.templates.iterations,
                        update=cfg.templates.update, init_std=cfg.templates.init_std,
                        seed=cfg.seed + 1, dtype=dtype)
    model = RetrievalModel(encoder=encoder, bank=bank)

    pixels = _pixel_tensors(train_set, dtype)
    fit_model_whitening(model, pixels, cfg.whitening.out_dim)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate,
                                 weight_decay=cfg.train.weight_decay)
    labels = [train_set.label(i) for i in range(len(train_set))]
    metrics: list[dict] = []
    metrics_path = run_dir / "train_log.jsonl"
    checkpoint_path = run_dir / "checkpoint.pt"
    best_path = run_dir / "checkpoint_best.pt"
    best_val = -1.0
    have_best = False
    last_good = None
    need_global = cfg.loss.use_global

    with metrics_path.open("w") as log_fh:
        for epoch in range(cfg.train.epochs):
            lr = cfg.train.learning_rate * cfg.train.lr_decay ** epoch
            for group in optimizer.param_groups:
                group["lr"] = lr

            descriptors = compute_global_descriptors(model, pixels[:len(train_set)])
            assignments = mine_hard_negatives(descriptors.cpu().numpy(), labels,
                                              cfg.train.negatives)
            tuples = build_epoch_tuples(train_set, assignments, cfg, epoch)

            sums = {"total": 0.0, "global": 0.0, "super": 0.0, "attn": 0.0}
            ratio_records = []
            id_counts = np.zeros(cfg.templates.count, dtype=np.int64)
            per_batch = cfg.train.tuples_per_batch
            for start in range(0, len(tuples), per_batch):
                batch = tuples[start:start + per_batch]
                feats = forward_tuples(model, pixels, batch, len(train_set),
                                       need_global)
                total, components, matchsets = total_loss(feats, cfg.loss, cfg.match)
                if not torch.isfinite(total):
                    _abort_divergence(model, last_good, checkpoint_path, cfg, epoch)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                sums["total"] += float(total.detach())
                for key in ("global", "super", "attn"):
                    sums[key] += float(components[key].detach())
                with torch.no_grad():
                    for feat, matches in zip(feats, matchsets):
                        neg_matches = sum(
                            len(select_matches(feat.anchor, neg, cfg.loss, cfg.match))
                            for neg in feat.negatives)
                        ratio_records.append((len(matches), neg_matches))
                        for fid in matches.ids:
                            id_counts[fid] += 1

            batches = cfg.train.batches_per_epoch
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": sums["total"] / batches,
                "loss_global": sums["global"] / batches,
                "loss_super": sums["super"] / batches,
                "loss_attn": sums["attn"] / batches,
                "match_ratio": match_ratio(ratio_records),
                "positive_matches": int(sum(r[0] for r in ratio_records)),
                "negative_matches": int(sum(r[1] for r in ratio_records)),
                "matches_per_id": id_counts.tolist(),
                "tuples": len(tuples),
                "val_map": None,
            }
            if (epoch + 1) % cfg.train.val_every == 0 or epoch == cfg.train.epochs - 1:
                result = evaluate_retrieval(
                    model, val_set, scales=cfg.retrieval.scales,
                    budget=cfg.retrieval.budget,
                    codebook_k=cfg.train.val_codebook_size,
                    kmeans_iterations=cfg.retrieval.kmeans_iterations,
                    alpha=cfg.retrieval.selectivity_alpha,
                    tau=cfg.retrieval.selectivity_threshold,
                    seed=cfg.seed)
                record["val_map"] = result["map"]
                if result["map"] > best_val:
                    best_val = result["map"]
                    save_checkpoint(model, best_path, seed=cfg.seed,
                                    extra={"epoch": epoch, "val_map": best_val})
                    have_best = True
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
            metrics.append(record)
            log.info("epoch %d: total %.5f ratio %s val %s", epoch,
                     record["loss_total"], record["match_ratio"], record["val_map"])
            last_good = {
                "encoder": copy.deepcopy(model.encoder.state_dict()),
                "bank": copy.deepcopy(model.bank.state_dict()),
                "epoch": epoch,
            }

    save_checkpoint(model, checkpoint_path, seed=cfg.seed,
                    extra={"epochs": cfg.train.epochs, "best_val_map": best_val})
    return TrainResult(model=model, checkpoint_path=checkpoint_path,
                       best_checkpoint_path=best_path if have_best else None,
                       metrics_path=metrics_path, metrics=metrics)


def _abort_divergence(model, last_good, checkpoint_path, cfg, epoch):
    if last_good is not None:
        model.encoder.load_state_dict(last_good["encoder"])
        model.bank.load_state_dict(last_good["bank"])
        save_checkpoint(model, checkpoint_path, seed=cfg.seed,
                        extra={"aborted_epoch": epoch,
                               "last_good_epoch": last_good["epoch"]})
    raise DivergenceDetected(f"non-finite loss at epoch {epoch}")


def measure_match_stats(model: RetrievalModel, dataset, cfg: RunConfig,
                        num_tuples: int, constraints=None, salt: int = 424243) -> dict:
    """Match statistics of a fixed checkpoint on seeded tuples.

    Builds tuples exactly like an epoch (mined negatives, seeded sampling,
    no augmentation), runs gradient-free selection per tuple against the
    positive and, for measurement only, against each negative, and reports
    the match ratio, the mean matched-pair count, and per-ID match counts.
    """
    constraints = constraints if constraints is not None else cfg.match
    dtype = model.encoder.dtype
    pixels = _pixel_tensors(dataset, dtype)
    labels = [dataset.label(i) for i in range(len(dataset))]
    with torch.no_grad():
        descriptors = compute_global_descriptors(model, pixels[:len(dataset)])
        assignments = mine_hard_negatives(descriptors.cpu().numpy(), labels,
                                          cfg.train.negatives)
        rng = np.random.default_rng((cfg.seed, salt))
        by_class = dataset.indices_by_class()
        images_per_tuple = 2 + cfg.train.negatives
        tuples = []
        for _ in range(num_tuples):
            anchor = int(rng.integers(len(dataset)))
            mates = [i for i in by_class[dataset.label(anchor)] if i != anchor]
            positive = mates[int(rng.integers(len(mates)))]
            tuples.append(TrainingTuple(anchor=anchor, positive=positive,
                                        negatives=assignments[anchor],
                                        flips=[False] * images_per_tuple))
        records = []
        id_counts = np.zeros(cfg.templates.count, dtype=np.int64)
        chunk = max(1, cfg.train.tuples_per_batch)
        for start in range(0, len(tuples), chunk):
            feats = forward_tuples(model, pixels, tuples[start:start + chunk],
                                   len(dataset), need_global=False)
            for item in feats:
                matches = select_matches(item.anchor, item.positive, cfg.loss,
                                         constraints)
                neg = sum(len(select_matches(item.anchor, nset, cfg.loss,
                                             constraints))
                          for nset in item.negatives)
                records.append((len(matches), neg))
                for fid in matches.ids:
                    id_counts[fid] += 1
    sizes = [r[0] for r in records]
    return {
        "match_ratio": match_ratio(records),
        "mean_matchset": float(np.mean(sizes)),
        "positive_matches": int(sum(r[0] for r in records)),
        "negative_matches": int(sum(r[1] for r in records)),
        "per_id_counts": id_counts,
        "tuples": num_tuples,
    }
