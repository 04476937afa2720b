import json

import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def image_world(tmp_path_factory):
    """Eight noise images over three outfits, with raw text descriptions."""
    root = tmp_path_factory.mktemp("world")
    images = root / "images"
    images.mkdir()
    rng = np.random.default_rng(7)
    item_ids = [f"item{k:02d}" for k in range(8)]
    for item_id in item_ids:
        pixels = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        Image.fromarray(pixels, "RGB").save(images / f"{item_id}.png")
    outfits = [
        {
            "outfit_id": "o1",
            "items": item_ids[0:3],
            "categories": ["top", "bottom", "shoes"],
            "descriptions": ["Red Cotton-Shirt", "Blue Jeans 2019", "White SNEAKERS!"],
        },
        {
            "outfit_id": "o2",
            "items": item_ids[3:6],
            "categories": ["top", "bottom", "shoes"],
            "descriptions": ["Green silk top", "Black-Skirt", "Leather boots"],
        },
        {
            "outfit_id": "o3",
            "items": item_ids[5:8],  # shares item05 with o2
            "categories": ["shoes", "bag", "hat"],
            "descriptions": ["Leather boots", "Canvas tote-bag", "Wool beanie"],
        },
    ]
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for outfit in outfits:
            f.write(json.dumps(outfit) + "\n")
    return {"root": root, "images": images, "manifest": manifest, "item_ids": item_ids}
