from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import require

_FILTERS = {
    "lanczos": Image.Resampling.LANCZOS,
    "bicubic": Image.Resampling.BICUBIC,
    "bilinear": Image.Resampling.BILINEAR,
    "nearest": Image.Resampling.NEAREST,
}


@dataclass
class Preprocessing:
    image_side: int = 256
    crop_ratio: float = 0.75
    resample_filter: str = "lanczos"

    def __post_init__(self):
        require(self.resample_filter in _FILTERS, f"unknown resample filter {self.resample_filter!r}")
        require(0 < self.crop_ratio <= 1, "crop_ratio must lie in (0, 1]")


@dataclass
class Record:
    image_path: Path
    caption: str


@dataclass
class Manifest:
    records: list[Record]
    preprocessing: Preprocessing = field(default_factory=Preprocessing)

    def __len__(self):
        return len(self.records)

    @property
    def captions(self) -> list[str]:
        return [r.caption for r in self.records]


def load_manifest(path: str | Path, preprocessing: Preprocessing | None = None) -> Manifest:
    """Read a JSON-lines manifest of ``{"image": <path relative to the file>, "caption": ...}``."""
    path = Path(path)
    root = path.parent
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        img = root / obj["image"]
        require(img.is_file(), f"{path}:{n}: image {img} not found")
        cap = str(obj.get("caption", "")).strip()
        require(bool(cap), f"{path}:{n}: empty caption")
        records.append(Record(img, cap))
    require(bool(records), f"{path} lists no records")
    return Manifest(records, preprocessing or Preprocessing())


def pil_to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tensor_to_pil(x: torch.Tensor) -> Image.Image:
    arr = ((x.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return Image.fromarray(arr)


def load_image(path: str | Path, side: int, resample: str = "lanczos") -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB").resize((side, side), _FILTERS[resample])


class ImageBank:
    """Resized manifest images held in memory, with optional random-crop augmentation.

    A crop of side ``crop_ratio * image_side`` is taken at a random offset and
    resized back to ``image_side``.
    """

    def __init__(self, manifest: Manifest):
        self.pre = manifest.preprocessing
        self.images = [load_image(r.image_path, self.pre.image_side, self.pre.resample_filter) for r in manifest.records]
        self._plain = torch.stack([pil_to_tensor(im) for im in self.images])

    def __len__(self):
        return len(self.images)

    @property
    def augments(self) -> bool:
        return self.pre.crop_ratio < 1.0

    def plain(self, indices=None) -> torch.Tensor:
        return self._plain if indices is None else self._plain[torch.as_tensor(indices)]

    def batch(self, indices, generator: torch.Generator | None = None) -> torch.Tensor:
        if not self.augments:
            return self.plain(indices)
        side = self.pre.image_side
        c = max(1, int(round(side * self.pre.crop_ratio)))
        out = []
        for i in indices:
            x0, y0 = (int(v) for v in torch.randint(0, side - c + 1, (2,), generator=generator))
            crop = self.images[int(i)].crop((x0, y0, x0 + c, y0 + c))
            out.append(pil_to_tensor(crop.resize((side, side), _FILTERS[self.pre.resample_filter])))
        return torch.stack(out)


class EpochSampler:
    """Shuffled pass over ``n`` items, ``batch_size`` at a time; state is a plain dict."""

    def __init__(self, n: int, batch_size: int, generator: torch.Generator):
        require(n >= 1, "empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.gen = generator
        self.perm: list[int] = []
        self.cursor = 0

    def next(self) -> list[int]:
        if self.cursor + self.batch_size > len(self.perm):
            self.perm = torch.randperm(self.n, generator=self.gen).tolist()
            self.cursor = 0
        out = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return out

    def state(self) -> dict:
        return {"perm": self.perm, "cursor": self.cursor}

    def load(self, st: dict) -> None:
        self.perm, self.cursor = list(st["perm"]), int(st["cursor"])
