"""Image feature extraction through a torchvision CNN's penultimate layer."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision.transforms import functional as tvf

from .frnf import write_frnf

log = logging.getLogger(__name__)

_IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")
_IMAGENET_MEAN = [0.485, 0.456, 0.406]
_IMAGENET_STD = [0.229, 0.224, 0.225]


class JobError(ValueError):
    pass


@dataclass
class ExtractionJob:
    image_dir: str
    manifest_path: str
    out_path: str
    model_name: str = "resnet18"
    weights: Optional[str] = "DEFAULT"  # None skips the download, random backbone
    batch_size: int = 16
    image_size: int = 224


def manifest_item_ids(manifest_path) -> list[str]:
    """Unique item ids across the manifest, in first-seen order.

    An id repeated inside one outfit is a data error; across outfits it
    is normal sharing.
    """
    ids: list[str] = []
    seen: set[str] = set()
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                items = obj["items"]
            except (json.JSONDecodeError, KeyError) as e:
                raise JobError(f"{manifest_path}:{lineno}: bad manifest line: {e}") from None
            if len(set(items)) != len(items):
                dup = next(i for i in items if items.count(i) > 1)
                raise JobError(f"{manifest_path}:{lineno}: duplicate item id {dup!r}")
            for item_id in items:
                if item_id not in seen:
                    seen.add(item_id)
                    ids.append(item_id)
    return ids


def resolve_image(image_dir, item_id) -> Optional[str]:
    for ext in _IMAGE_EXTENSIONS:
        path = os.path.join(image_dir, item_id + ext)
        if os.path.isfile(path):
            return path
    return None


def load_backbone(model_name: str, weights: Optional[str]) -> torch.nn.Module:
    """Instantiate the CNN and cut it at its penultimate layer."""
    try:
        model = models.get_model(model_name, weights=weights)
    except Exception as e:
        raise JobError(f"cannot load model {model_name!r}: {e}") from None
    for head in ("fc", "classifier", "head", "heads"):
        if hasattr(model, head):
            setattr(model, head, torch.nn.Identity())
            break
    else:
        raise JobError(f"model {model_name!r} has no recognizable classifier head")
    model.eval()
    return model


def _load_tensor(path, size) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        img = tvf.resize(img, [size, size])
    tensor = tvf.to_tensor(img)
    return tvf.normalize(tensor, _IMAGENET_MEAN, _IMAGENET_STD)


def extract(job: ExtractionJob) -> tuple[list[str], int]:
    """Write one penultimate-layer feature vector per resolvable item.

    Unreadable or missing images are skipped with a logged id; zero
    successes is a job error. Returns (written ids, feature dim).
    """
    item_ids = manifest_item_ids(job.manifest_path)
    if not item_ids:
        raise JobError(f"{job.manifest_path}: no items to extract")
    model = load_backbone(job.model_name, job.weights)
    kept_ids: list[str] = []
    chunks: list[np.ndarray] = []
    batch_ids: list[str] = []
    batch_imgs: list[torch.Tensor] = []

    def flush():
        if not batch_imgs:
            return
        with torch.no_grad():
            out = model(torch.stack(batch_imgs))
        chunks.append(out.reshape(out.shape[0], -1).numpy().astype(np.float32))
        kept_ids.extend(batch_ids)
        batch_ids.clear()
        batch_imgs.clear()

    for item_id in item_ids:
        path = resolve_image(job.image_dir, item_id)
        if path is None:
            log.warning("no image for item %s; skipped", item_id)
            continue
        try:
            tensor = _load_tensor(path, job.image_size)
        except Exception as e:
            log.warning("unreadable image for item %s (%s); skipped", item_id, e)
            continue
        batch_ids.append(item_id)
        batch_imgs.append(tensor)
        if len(batch_imgs) >= job.batch_size:
            flush()
    flush()
    if not kept_ids:
        raise JobError("no item produced features; every image was missing or unreadable")
    vectors = np.concatenate(chunks, axis=0)
    write_frnf(kept_ids, vectors, job.out_path)
    log.info("wrote %d vectors of dim %d to %s", len(kept_ids), vectors.shape[1], job.out_path)
    return kept_ids, int(vectors.shape[1])
