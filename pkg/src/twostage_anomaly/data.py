"""Datasets: folder-layout defect sets, one-class protocols, synthetic defects.

Images are handled as float32 ``H x W x C`` arrays in ``[0, 1]``.  Masks are
``H x W`` uint8 arrays with values in ``{0, 1}``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (DatasetNotFoundError, DecodeError, InvalidCountError,
                     LayoutViolationError, UnknownClassError)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
NORMAL_LABEL = "good"


@dataclass
class DatasetItem:
    """One image of a dataset.

    ``path`` is ``None`` for in-memory items; those carry ``image`` (and
    ``mask`` when anomalous) directly.
    """

    key: str
    split: str
    label: str
    category: str
    path: Path | None = None
    mask_path: Path | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    mask: np.ndarray | None = field(default=None, repr=False)
    is_anomalous: bool = False
    painted_pixels: int | None = None

    @property
    def has_mask(self) -> bool:
        return self.mask_path is not None or self.mask is not None


@dataclass
class DatasetHandle:
    root_path: Path | None
    split: str
    items: list[DatasetItem]
    image_size: int
    channels: int = 3

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def select(self, split: str) -> "DatasetHandle":
        return dataclasses.replace(self, split=split,
                                   items=[it for it in self.items if it.split == split])

    @property
    def labels(self) -> list[str]:
        return sorted({it.label for it in self.items})

    @property
    def categories(self) -> list[str]:
        return sorted({it.category for it in self.items})

    def load_image(self, item: DatasetItem) -> np.ndarray:
        if item.image is not None:
            return preprocess(item.image, self.image_size, self.channels)
        return preprocess(read_image(item.path), self.image_size, self.channels)

    def load_mask(self, item: DatasetItem) -> np.ndarray:
        """Ground-truth mask at ``image_size``; all zeros for normal items."""
        if item.mask is not None:
            raw = item.mask.astype(np.float32)
        elif item.mask_path is not None:
            raw = read_mask(item.mask_path).astype(np.float32)
        else:
            return np.zeros((self.image_size, self.image_size), dtype=np.uint8)
        if raw.shape != (self.image_size, self.image_size):
            t = torch.from_numpy(raw)[None, None]
            raw = F.interpolate(t, size=(self.image_size,) * 2, mode="nearest")[0, 0].numpy()
        return (raw > 0.5).astype(np.uint8)

    def stack_images(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, self.image_size, self.image_size, self.channels), np.float32)
        return np.stack([self.load_image(it) for it in self.items])

    def manifest_lines(self) -> list[str]:
        """Line-delimited index: ``path<TAB>label<TAB>mask-path`` per item."""
        lines = []
        for it in self.items:
            path = str(it.path) if it.path is not None else f"memory:{it.key}"
            mask = str(it.mask_path) if it.mask_path is not None else "-"
            lines.append(f"{path}\t{it.label}\t{mask}")
        return lines

    def write_manifest(self, path) -> None:
        Path(path).write_text("\n".join(self.manifest_lines()) + "\n")


# ----------------------------------------------------------------------
# Decoding and preprocessing

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
            if im.mode not in ("L", "RGB"):
                arr = np.asarray(im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def preprocess(image, target_size: int, channels: int = 3) -> np.ndarray:
    """Resize to ``target_size`` squared (bilinear) and scale into [0, 1].

    Integer inputs are scaled by their dtype maximum; float inputs are taken
    to be in [0, 1] already.  Grayscale inputs are replicated to ``channels``.
    """
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    arr = np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / float(np.iinfo(arr.dtype).max)
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DecodeError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.shape[2] == 1 and channels == 3:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 3 and channels == 1:
        arr = arr.mean(axis=2, keepdims=True)
    if arr.shape[:2] != (target_size, target_size):
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(target_size, target_size), mode="bilinear",
                          align_corners=False)
        arr = t[0].numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------
# Folder datasets

def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, image_path: Path) -> Path | None:
    for name in (f"{image_path.stem}_mask.png", f"{image_path.stem}.png"):
        candidate = gt_dir / name
        if candidate.exists():
            return candidate
    return None


def load_folder_dataset(root, split: str, image_size: int = 256,
                        channels: int = 3) -> DatasetHandle:
    """Enumerate a category folder laid out as::

        root/train/good/*.png
        root/test/<defect>/*.png        (``good`` for normal test images)
        root/ground_truth/<defect>/<stem>_mask.png

    Items come back in lexicographic path order.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    split_dir = root / split
    if not root.is_dir() or not split_dir.is_dir():
        raise DatasetNotFoundError(f"dataset split not found: {split_dir}")
    category = root.name
    items = []
    if split == "train":
        good = split_dir / NORMAL_LABEL
        if not good.is_dir():
            raise LayoutViolationError(f"missing {good}")
        for p in _images_in(good):
            items.append(DatasetItem(key=f"train/{NORMAL_LABEL}/{p.name}", split="train",
                                     label=NORMAL_LABEL, category=category, path=p))
    else:
        for sub in sorted(d for d in split_dir.iterdir() if d.is_dir()):
            anomalous = sub.name != NORMAL_LABEL
            for p in _images_in(sub):
                mask_path = None
                if anomalous:
                    mask_path = _find_mask(root / "ground_truth" / sub.name, p)
                    if mask_path is None:
                        raise LayoutViolationError(f"anomalous image {p} has no mask")
                items.append(DatasetItem(key=f"test/{sub.name}/{p.name}", split="test",
                                         label=sub.name, category=category, path=p,
                                         mask_path=mask_path, is_anomalous=anomalous))
    return DatasetHandle(root, split, items, image_size, channels)


def load_class_folder_dataset(root, image_size: int = 64, channels: int = 3) -> DatasetHandle:
    """Gridded class dataset: ``root/{train,test}/<class>/*.png``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset not found: {root}")
    items = []
    for split in ("train", "test"):
        split_dir = root / split
        if not split_dir.is_dir():
            raise DatasetNotFoundError(f"dataset split not found: {split_dir}")
        for sub in sorted(d for d in split_dir.iterdir() if d.is_dir()):
            for p in _images_in(sub):
                items.append(DatasetItem(key=f"{split}/{sub.name}/{p.name}", split=split,
                                         label=sub.name, category=root.name, path=p))
    return DatasetHandle(root, "all", items, image_size, channels)


def build_one_class_protocol(dataset: DatasetHandle, normal_class):
    """Split a labeled dataset into a one-class train set and a binary test set.

    Train keeps only ``normal_class`` items of the train split; test keeps the
    whole test split with ``is_anomalous`` set for every other class.
    """
    normal_class = str(normal_class)
    if normal_class not in dataset.labels:
        raise UnknownClassError(f"class {normal_class!r} not in {dataset.labels}")
    category = f"class_{normal_class}"
    train, test = [], []
    for it in dataset.items:
        if it.split == "train" and it.label == normal_class:
            train.append(dataclasses.replace(it, category=category, is_anomalous=False))
        elif it.split == "test":
            test.append(dataclasses.replace(it, category=category,
                                            is_anomalous=it.label != normal_class))
    return (dataclasses.replace(dataset, split="train", items=train),
            dataclasses.replace(dataset, split="test", items=test))


def load_digits_dataset(image_size: int = 64, channels: int = 3,
                        train_fraction: float = 0.7) -> DatasetHandle:
    """The 8x8 handwritten digits bundled with scikit-learn, as a 10-class set.

    The first ``train_fraction`` of each class (in file order) is the train
    split, the remainder the test split.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = (digits.images / 16.0).astype(np.float32)
    items = []
    for cls in range(10):
        idx = np.flatnonzero(digits.target == cls)
        n_train = int(round(train_fraction * len(idx)))
        for rank, i in enumerate(idx):
            split = "train" if rank < n_train else "test"
            items.append(DatasetItem(key=f"{split}/{cls}/{i:04d}", split=split,
                                     label=str(cls), category="digits", image=images[i]))
    return DatasetHandle(None, "all", items, image_size, channels)


# ----------------------------------------------------------------------
# Synthetic defects

def _clean_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Woven grating texture with small random shift and rotation."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    shift = rng.uniform(-2.0, 2.0, size=2) * size / 64
    theta = np.deg2rad(rng.uniform(-4.0, 4.0))
    u = (xx - size / 2 + shift[0]) * np.cos(theta) - (yy - size / 2 + shift[1]) * np.sin(theta)
    v = (xx - size / 2 + shift[0]) * np.sin(theta) + (yy - size / 2 + shift[1]) * np.cos(theta)
    period = size / 8
    weave = np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period)
    fine = np.cos(2 * np.pi * (u + v) / (period / 2))
    base = 0.5 + 0.18 * weave + 0.05 * fine
    tint = np.array([1.0, 0.92, 0.8])
    img = base[:, :, None] * tint[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _paint_defects(rng: np.random.Generator, img: np.ndarray):
    """Paint 1-2 rectangles or 3-pixel strokes; returns (image, mask, painted)."""
    size = img.shape[0]
    mask = np.zeros((size, size), dtype=bool)
    painted = set()
    for _ in range(int(rng.integers(1, 3))):
        value = rng.uniform(0.0, 0.1) if rng.random() < 0.5 else rng.uniform(0.9, 1.0)
        region = np.zeros_like(mask)
        if rng.random() < 0.5:
            lo, hi = max(2, size // 10), max(3, size // 4)
            h, w = rng.integers(lo, hi + 1, size=2)
            y0 = rng.integers(0, size - h + 1)
            x0 = rng.integers(0, size - w + 1)
            region[y0:y0 + h, x0:x0 + w] = True
        else:
            length = int(rng.integers(size // 6, size // 2 + 1))
            direction = rng.integers(0, 4)
            dy, dx = [(0, 1), (1, 0), (1, 1), (1, -1)][direction]
            y0 = int(rng.integers(2, size - 2))
            x0 = int(rng.integers(2, size - 2))
            for t in range(length):
                cy, cx = y0 + dy * t, x0 + dx * t
                region[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = True
        ys, xs = np.nonzero(region)
        painted.update(zip(ys.tolist(), xs.tolist()))
        img[region] = value
        mask |= region
    return img, mask.astype(np.uint8), len(painted)


def synth_defect_dataset(n_clean: int, n_defect: int, image_size: int = 64, seed: int = 0,
                         n_test_clean: int = 0, channels: int = 3,
                         category: str = "synthetic") -> DatasetHandle:
    """Reproducible textured images with painted defects and exact masks.

    The returned handle spans both splits: ``n_clean`` clean train items plus
    a test split of ``n_defect`` defect items followed by ``n_test_clean``
    clean items.  Each defect item records ``painted_pixels``, the generator's
    own tally of painted pixel coordinates.
    """
    if n_clean < 1:
        raise InvalidCountError("n_clean must be >= 1")
    if n_defect < 0 or n_test_clean < 0:
        raise InvalidCountError("test counts must be >= 0")
    if image_size < 8:
        raise InvalidCountError("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_clean):
        img = _clean_texture(rng, image_size).astype(np.float32)
        items.append(DatasetItem(key=f"train/good/{i:04d}", split="train", label=NORMAL_LABEL,
                                 category=category, image=img))
    for i in range(n_defect):
        img = _clean_texture(rng, image_size)
        img, mask, count = _paint_defects(rng, img)
        items.append(DatasetItem(key=f"test/defect/{i:04d}", split="test", label="defect",
                                 category=category, image=img.astype(np.float32), mask=mask,
                                 is_anomalous=True, painted_pixels=count))
    for i in range(n_test_clean):
        img = _clean_texture(rng, image_size).astype(np.float32)
        items.append(DatasetItem(key=f"test/good/{i:04d}", split="test", label=NORMAL_LABEL,
                                 category=category, image=img))
    return DatasetHandle(None, "all", items, image_size, channels)


def write_folder_dataset(dataset: DatasetHandle, root) -> Path:
    """Materialize an in-memory dataset in the folder layout read by
    :func:`load_folder_dataset` (8-bit PNG images, binary PNG masks)."""
    root = Path(root)
    for it in dataset.items:
        img = dataset.load_image(it)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        sub = root / it.split / it.label
        sub.mkdir(parents=True, exist_ok=True)
        name = it.key.rsplit("/", 1)[-1]
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(sub / f"{name}.png")
        if it.is_anomalous and it.has_mask:
            gt = root / "ground_truth" / it.label
            gt.mkdir(parents=True, exist_ok=True)
            mask = dataset.load_mask(it) * 255
            Image.fromarray(mask.astype(np.uint8)).save(gt / f"{name}_mask.png")
    return root
