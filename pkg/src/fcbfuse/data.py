"""Dataset loading, seeded splits and resizing."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import functional as F

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Dataset layout or decoding problem."""


@dataclass
class SamplePair:
    """Float32 image (3, H, W) and mask (1, H, W), both in [0, 1]."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be 3 x H x W, got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def _files_by_stem(folder: Path) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for f in sorted(folder.iterdir()):
        if f.is_file() and f.suffix.lower() in IMAGE_EXTS:
            if f.stem in out:
                raise DataError(f"duplicate stem {f.stem!r} in {folder}")
            out[f.stem] = f
    return out


def _decode(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def read_image(path: str | Path) -> np.ndarray:
    """RGB image file to float32 (3, H, W) in [0, 1]."""
    im = _decode(Path(path)).convert("RGB")
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def read_mask(path: str | Path) -> np.ndarray:
    """Mask file to float32 (1, H, W) in [0, 1]; colour masks are averaged over channels."""
    im = _decode(Path(path))
    if im.mode not in ("L", "1"):
        im = im.convert("RGB")
    arr = np.asarray(im, dtype=np.float32)
    if im.mode == "1":
        arr = arr * 255.0
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr / 255.0)[None].astype(np.float32)


def load_dataset(root: str | Path) -> list[SamplePair]:
    """Load ``root/images`` and ``root/masks`` paired by filename stem, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if not img_dir.is_dir():
        if not any(root.iterdir()):
            return []
        raise DataError(f"images directory not found: {img_dir}")
    images = _files_by_stem(img_dir)
    if not images:
        return []
    if not mask_dir.is_dir():
        raise DataError(f"masks directory not found: {mask_dir}")
    masks = _files_by_stem(mask_dir)
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"no mask for image(s): {', '.join(missing)}")
    out = []
    for stem in sorted(images):
        img, mask = read_image(images[stem]), read_mask(masks[stem])
        if img.shape[1:] != mask.shape[1:]:
            raise DataError(f"{stem}: image {img.shape[1:]} and mask {mask.shape[1:]} sizes differ")
        out.append(SamplePair(img, mask, stem))
    return out


def split_sizes(n: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Val and test get round-half-up of their fraction; the remainder goes to train."""
    if n < 10:
        raise ValueError(f"need at least 10 items to split, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    n_val = int(np.floor(fractions[1] * n + 0.5))
    n_test = int(np.floor(fractions[2] * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_ids(ids: Sequence[str], seed: int,
              fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> dict[str, str]:
    """Seeded shuffle of sorted ids, then contiguous train/val/test slices."""
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    n_train, n_val, _ = split_sizes(len(ids), fractions)
    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {}
    for rank, i in enumerate(order):
        assignment[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return assignment


def split_dataset(items: Sequence[SamplePair], seed: int,
                  fractions: Sequence[float] = (0.8, 0.1, 0.1)):
    """(train, val, test) lists plus the id -> split assignment."""
    assignment = split_ids([s.id for s in items], seed, fractions)
    return apply_split(items, assignment), assignment


def apply_split(items: Sequence[SamplePair], assignment: dict[str, str]):
    parts: dict[str, list[SamplePair]] = {k: [] for k in SPLITS}
    for s in items:
        if s.id not in assignment:
            raise DataError(f"sample {s.id!r} is missing from the split manifest")
        parts[assignment[s.id]].append(s)
    return parts["train"], parts["val"], parts["test"]


def write_manifest(assignment: dict[str, str], path: str | Path) -> None:
    lines = [f"{sid}\t{assignment[sid]}\n" for sid in sorted(assignment)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DataError(f"{path}:{n}: malformed manifest line {line!r}")
        out[parts[0]] = parts[1]
    return out


def resize_pair(s: SamplePair, hw: tuple[int, int], mask_policy: str = "soft") -> SamplePair:
    """Antialiased bilinear resize of image and mask; optionally binarize the mask at 0.5."""
    if mask_policy not in ("soft", "binarized"):
        raise ValueError(f"unknown mask policy {mask_policy!r}")
    h, w = hw
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {hw}")
    image = F.resize_array(s.image, h, w, "bilinear", antialias=True)
    mask = F.resize_array(s.mask, h, w, "bilinear", antialias=True)
    if mask_policy == "binarized":
        mask = (mask >= 0.5).astype(np.float32)
    return SamplePair(image.astype(np.float32, copy=False), mask.astype(np.float32, copy=False), s.id)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return img * 2.0 - 1.0
