"""Dataset indexing, image/mask decoding, prompt gathering and batching."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ..backbone import bilinear
from ..prompts import PromptProvider, PromptsConfig, TextProvider

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    entries: list[tuple[str, Path, Path]]
    resolution: int

    @classmethod
    def from_root(cls, root, resolution: int) -> "DatasetIndex":
        root = Path(root)
        img_dir, mask_dir = root / "images", root / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise DatasetError(f"{root} must contain images/ and masks/")
        entries, seen = [], set()
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            if p.stem in seen:
                raise DatasetError(f"duplicate image id {p.stem!r} in {img_dir}")
            seen.add(p.stem)
            mask = mask_dir / f"{p.stem}.png"
            if not mask.exists():
                raise DatasetError(f"missing mask for image {p.stem!r}: {mask}")
            entries.append((p.stem, p, mask))
        if not entries:
            raise DatasetError(f"no images found in {img_dir}")
        return cls(root, entries, resolution)


def read_image(path) -> torch.Tensor:
    """RGB image as a float tensor (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path) -> torch.Tensor:
    """Single-channel mask as float (H, W) in [0, 1], not yet binarized."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def resize_image(image: torch.Tensor, resolution: int) -> torch.Tensor:
    return bilinear(image.unsqueeze(0), resolution).squeeze(0)


def binarize(mask: torch.Tensor) -> torch.Tensor:
    return (mask >= 0.5).float()


@dataclass
class Sample:
    image_id: str
    image: torch.Tensor  # (3, R, R)
    mask: torch.Tensor  # (1, R, R) binary
    gt: torch.Tensor  # (H, W) binary at original resolution
    prompts: dict = field(default_factory=dict)
    text: dict = field(default_factory=dict)


class PromptBank:
    """Providers for every configured source, plus text for cross-attended ones."""

    def __init__(self, cfg: PromptsConfig):
        self.cfg = cfg
        self.providers = {s.name: PromptProvider(s, cfg.prompts_dir, cfg.seed) for s in cfg.sources}
        self.text = {
            s.name: TextProvider(s.cross_attention, s.provider, cfg.prompts_dir, cfg.seed)
            for s in cfg.sources
            if s.cross_attention is not None
        }

    def gather(self, image_id: str, image: torch.Tensor) -> tuple[dict, dict]:
        prompts = {n: p.provide(image_id, image).data for n, p in self.providers.items()}
        text = {n: t.provide(image_id).data for n, t in self.text.items()}
        return prompts, text


def load_dataset(
    index: DatasetIndex, prompts_cfg: Optional[PromptsConfig] = None, skip_bad_files: bool = False
) -> list[Sample]:
    """Decode, resize and attach prompts for every entry, in index order."""
    bank = PromptBank(prompts_cfg) if prompts_cfg is not None else None
    samples = []
    for image_id, img_path, mask_path in index.entries:
        try:
            image = read_image(img_path)
            raw_mask = read_mask(mask_path)
        except (UnidentifiedImageError, OSError) as e:
            if skip_bad_files:
                log.warning("skipping %s: %s", image_id, e)
                continue
            raise DatasetError(f"cannot decode {image_id!r}: {e}") from e
        image = resize_image(image, index.resolution)
        mask = binarize(bilinear(raw_mask[None, None], index.resolution)[0])
        sample = Sample(image_id, image, mask, binarize(raw_mask))
        if bank is not None:
            sample.prompts, sample.text = bank.gather(image_id, image)
        samples.append(sample)
    if not samples:
        raise DatasetError(f"no usable samples in {index.root}")
    return samples


@dataclass
class Batch:
    ids: list[str]
    images: torch.Tensor
    masks: torch.Tensor
    prompts: dict
    text: dict
    text_mask: dict

    def to(self, dtype) -> "Batch":
        cast = lambda d: {k: v.to(dtype) for k, v in d.items()}  # noqa: E731
        return Batch(self.ids, self.images.to(dtype), self.masks.to(dtype), cast(self.prompts), cast(self.text), self.text_mask)


def collate(samples: Sequence[Sample]) -> Batch:
    prompts = {k: torch.stack([s.prompts[k] for s in samples]) for k in samples[0].prompts}
    text, text_mask = {}, {}
    for k in samples[0].text:
        rows = [s.text[k] for s in samples]
        longest = max(r.shape[0] for r in rows)
        padded = torch.zeros(len(rows), longest, rows[0].shape[1])
        mask = torch.zeros(len(rows), longest, dtype=torch.bool)
        for i, r in enumerate(rows):
            padded[i, : r.shape[0]] = r
            mask[i, : r.shape[0]] = True
        text[k] = padded
        text_mask[k] = mask
    return Batch(
        [s.image_id for s in samples],
        torch.stack([s.image for s in samples]),
        torch.stack([s.mask for s in samples]),
        prompts,
        text,
        text_mask,
    )


def iterate_batches(samples: Sequence[Sample], batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless shuffled batches; the order depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(samples)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield collate([samples[i] for i in order[start : start + batch_size]])


def make_blob_corpus(root, n: int, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` images of a bright reddish ellipse on a dark noisy background.

    Foreground and background are separable by colour alone.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    for k in range(n):
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
        ry, rx = rng.uniform(0.12 * size, 0.3 * size, 2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        bg = rng.uniform(0.0, 0.3, (size, size, 3))
        fg = np.array([0.9, 0.35, 0.2]) + rng.uniform(-0.1, 0.1, (size, size, 3))
        img = np.where(mask[..., None], fg, bg)
        Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(root / "images" / f"blob{k:03d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(root / "masks" / f"blob{k:03d}.png")
    return root
