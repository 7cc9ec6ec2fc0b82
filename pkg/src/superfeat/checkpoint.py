"""Model checkpointing: a single binary file plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .encoder import ConvEncoder
from .model import RetrievalModel
from .templates import TemplateBank
from .whitening import WhiteningTransform

CHECKPOINT_VERSION = "1"


def save_checkpoint(model: RetrievalModel, path, seed: int, extra: dict | None = None):
    """Write encoder + template bank weights and frozen whiteners to `path`,
    with a JSON sidecar (`path` + .json) recording dims, stride, and seed."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder": model.encoder.state_dict(),
        "bank": model.bank.state_dict(),
        "whitener": model.whitener.state_dict() if model.whitener else None,
        "local_whitener": (model.local_whitener.state_dict()
                           if model.local_whitener else None),
        "meta": {
            "encoder_dim": model.encoder.dim,
            "encoder_base_channels": model.encoder.base_channels,
            "encoder_min_side": model.encoder.min_side,
            "template_count": model.bank.count,
            "template_dim": model.bank.dim,
            "iterations": model.bank.iterations,
            "update": model.bank.update,
            "dtype": str(model.encoder.dtype).removeprefix("torch."),
            "seed": seed,
        },
    }
    torch.save(payload, path)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "stride": ConvEncoder.stride,
        **payload["meta"],
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> RetrievalModel:
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    meta = payload["meta"]
    dtype = getattr(torch, meta["dtype"])
    encoder = ConvEncoder(dim=meta["encoder_dim"],
                          base_channels=meta["encoder_base_channels"],
                          min_side=meta["encoder_min_side"],
                          seed=meta["seed"], dtype=dtype)
    encoder.load_state_dict(payload["encoder"])
    bank = TemplateBank(feature_dim=meta["encoder_dim"], dim=meta["template_dim"],
                        count=meta["template_count"], iterations=meta["iterations"],
                        update=meta["update"], seed=meta["seed"], dtype=dtype)
    bank.load_state_dict(payload["bank"])
    whitener = (WhiteningTransform.from_state(payload["whitener"])
                if payload["whitener"] else None)
    local = (WhiteningTransform.from_state(payload["local_whitener"])
             if payload["local_whitener"] else None)
    model = RetrievalModel(encoder=encoder, bank=bank, whitener=whitener,
                           local_whitener=local)
    model.eval()
    return model
