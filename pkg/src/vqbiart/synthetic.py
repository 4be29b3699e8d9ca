"""Procedural image/caption pairs for desk-scale runs.

Each scene is a flat background with one coloured shape placed in a
quadrant; the caption names the shape, its colour, the quadrant and the
background, and ends with a full stop.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 210),
    "yellow": (235, 215, 50),
    "white": (245, 245, 245),
    "black": (20, 20, 20),
}
SHAPES = ("square", "circle", "triangle")
PLACES = ("top left", "top right", "bottom left", "bottom right")
BACKGROUNDS = ("black", "white", "blue", "green")


def scene_specs(n: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    combos = [
        c
        for c in itertools.product(SHAPES, COLORS, PLACES, BACKGROUNDS)
        if c[1] != c[3]
    ]
    pick = rng.permutation(len(combos))[:n]
    return [dict(zip(("shape", "color", "place", "background"), combos[i])) for i in pick]


def caption_for(spec: dict) -> str:
    return f"a {spec['color']} {spec['shape']} in the {spec['place']} on {spec['background']}."


def render(spec: dict, side: int = 64) -> Image.Image:
    img = Image.new("RGB", (side, side), COLORS[spec["background"]])
    draw = ImageDraw.Draw(img)
    half = side // 2
    top = 0 if spec["place"].startswith("top") else half
    left = 0 if spec["place"].endswith("left") else half
    m = side // 10
    box = (left + m, top + m, left + half - m, top + half - m)
    color = COLORS[spec["color"]]
    if spec["shape"] == "square":
        draw.rectangle(box, fill=color)
    elif spec["shape"] == "circle":
        draw.ellipse(box, fill=color)
    else:
        x0, y0, x1, y1 = box
        draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=color)
    return img


def make_pairs(n: int, side: int = 64, seed: int = 0) -> list[tuple[Image.Image, str]]:
    return [(render(s, side), caption_for(s)) for s in scene_specs(n, seed)]


def to_tensor(img: Image.Image):
    import torch

    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_manifest(out_dir: str | Path, n: int, side: int = 64, seed: int = 0) -> Path:
    """Render ``n`` scenes as PNG files plus a JSON-lines manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, cap) in enumerate(make_pairs(n, side, seed)):
        rel = f"images/{i:04d}.png"
        img.save(out / rel)
        lines.append(json.dumps({"image": rel, "caption": cap}))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
