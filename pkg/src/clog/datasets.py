"""Dataset ingestion.

Every loader returns images as float32 ``(N, C, H, W)`` tensors in ``[-1, 1]``
and labels as int64 class ids. Readers are deterministic: repeated calls on
the same files give byte-identical tensors.
"""

from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from clog.errors import IngestionError, InvalidInputError

DATA_ROOT_ENV = "CLOG_DATA_ROOT"


@dataclass(frozen=True)
class DatasetInfo:
    dataset_id: str
    num_classes: int
    channels: int
    resolution: int


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    dataset_id: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IngestionError(f"{self.dataset_id}: {len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise IngestionError(f"{self.dataset_id}: images must be (N, C, H, W)")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise IngestionError(f"{self.dataset_id}: label outside 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_classes))


def default_root(root_path: str | os.PathLike | None = None) -> Path:
    if os.environ.get(DATA_ROOT_ENV):
        return Path(os.environ[DATA_ROOT_ENV])
    if root_path is not None:
        return Path(root_path)
    return Path("data")


def _to_unit_range(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0)


def _resize(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False).clamp_(-1.0, 1.0)


# -- synthetic shapes -------------------------------------------------------

SHAPES8_PER_CLASS = 500
SHAPES8_SEED = 20240601


def _draw_shape(kind: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.full((8, 8), -1.0, dtype=np.float32)
    if kind == 0:  # filled square, side 4
        r, c = rng.integers(0, 5, size=2)
        canvas[r : r + 4, c : c + 4] = 1.0
    elif kind == 1:  # filled circle, radius 2.5
        cy, cx = rng.integers(2, 6, size=2) + 0.5
        yy, xx = np.mgrid[0:8, 0:8] + 0.5
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= 2.5**2] = 1.0
    elif kind == 2:  # plus-shaped cross, arm length 2
        r, c = rng.integers(2, 6, size=2)
        canvas[r, c - 2 : c + 3] = 1.0
        canvas[r - 2 : r + 3, c] = 1.0
    else:  # horizontal stripe, 2 rows high
        r = rng.integers(0, 7)
        canvas[r : r + 2, :] = 1.0
    return canvas


def make_shapes8(per_class: int = SHAPES8_PER_CLASS, seed: int = SHAPES8_SEED) -> LabeledDataset:
    """4 classes (square, circle, cross, stripe) at random offsets on 8x8."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), per_class)
    rng.shuffle(labels)
    images = np.stack([_draw_shape(int(k), rng) for k in labels])[:, None]
    return LabeledDataset("shapes8", torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), 4)


# -- IDX (MNIST, FashionMNIST) ----------------------------------------------


def _find(base: Path, names: list[str]) -> Path:
    for sub in ("", "raw"):
        for name in names:
            for candidate in (base / sub / name, base / sub / (name + ".gz")):
                if candidate.exists():
                    return candidate
    raise IngestionError(f"none of {names} found under {base}")


def read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise IngestionError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    shape = tuple(int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    offset = 4 + 4 * ndim
    expected = int(np.prod(shape))
    if len(data) - offset != expected:
        raise IngestionError(f"{path}: expected {expected} payload bytes, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(shape)


def _load_idx_dataset(dataset_id: str, base: Path, split: str) -> LabeledDataset:
    prefixes = {"train": ["train"], "test": ["t10k"], "all": ["train", "t10k"]}[split]
    images, labels = [], []
    for prefix in prefixes:
        images.append(read_idx(_find(base, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])))
        labels.append(read_idx(_find(base, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])))
    x = _resize(_to_unit_range(np.concatenate(images))[:, None], 32)
    y = torch.from_numpy(np.concatenate(labels).astype(np.int64))
    return LabeledDataset(dataset_id, x.contiguous(), y, 10)


# -- CIFAR-10 python batches ------------------------------------------------


def _load_cifar10(base: Path, split: str) -> LabeledDataset:
    folder = base / "cifar-10-batches-py" if (base / "cifar-10-batches-py").exists() else base
    names = {
        "train": [f"data_batch_{i}" for i in range(1, 6)],
        "test": ["test_batch"],
        "all": [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"],
    }[split]
    images, labels = [], []
    for name in names:
        path = folder / name
        try:
            with open(path, "rb") as fh:
                batch = pickle.load(fh, encoding="bytes")
        except (OSError, pickle.UnpicklingError, EOFError) as exc:
            raise IngestionError(f"cannot read {path}: {exc}") from exc
        images.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    return LabeledDataset(
        "cifar10", _to_unit_range(np.concatenate(images)).contiguous(), torch.from_numpy(np.concatenate(labels)), 10
    )


# -- downsampled ImageNet (npz batches) --------------------------------------


def _load_imagenet64(base: Path, split: str) -> LabeledDataset:
    if split == "train":
        files = sorted(base.glob("train_data_batch_*"), key=lambda p: int(p.name.split("_")[-1].split(".")[0]))
    else:
        files = sorted(base.glob("val_data*"))
    if not files:
        raise IngestionError(f"no downsampled ImageNet batches under {base}")
    images, labels = [], []
    for path in files:
        try:
            with np.load(path) as batch:
                images.append(batch["data"].reshape(-1, 3, 64, 64))
                labels.append(batch["labels"].astype(np.int64) - 1)
        except (OSError, KeyError, ValueError) as exc:
            raise IngestionError(f"cannot read {path}: {exc}") from exc
    return LabeledDataset(
        "imagenet64", _to_unit_range(np.concatenate(images)).contiguous(), torch.from_numpy(np.concatenate(labels)), 1000
    )


# -- class-per-directory image folders ---------------------------------------

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}


def _load_image_folder(dataset_id: str, base: Path, num_classes: int, size: int) -> LabeledDataset:
    from PIL import Image

    class_dirs = sorted(p for p in base.iterdir() if p.is_dir()) if base.exists() else []
    if len(class_dirs) != num_classes:
        raise IngestionError(f"{base}: expected {num_classes} class directories, found {len(class_dirs)}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB").resize((size, size), Image.BILINEAR)
                    images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            except OSError as exc:
                raise IngestionError(f"cannot decode {path}: {exc}") from exc
            labels.append(label)
    return LabeledDataset(
        dataset_id, _to_unit_range(np.stack(images)), torch.tensor(labels, dtype=torch.int64), num_classes
    )


# -- registry ---------------------------------------------------------------

DATASETS: dict[str, DatasetInfo] = {
    "shapes8": DatasetInfo("shapes8", 4, 1, 8),
    "mnist": DatasetInfo("mnist", 10, 1, 32),
    "fashionmnist": DatasetInfo("fashionmnist", 10, 1, 32),
    "cifar10": DatasetInfo("cifar10", 10, 3, 32),
    "imagenet64": DatasetInfo("imagenet64", 1000, 3, 64),
    "oxford_flowers": DatasetInfo("oxford_flowers", 102, 3, 128),
    "cub_birds": DatasetInfo("cub_birds", 200, 3, 128),
    "stanford_cars": DatasetInfo("stanford_cars", 196, 3, 128),
}

_LOADERS: dict[str, Callable[[Path, str], LabeledDataset]] = {
    "shapes8": lambda base, split: make_shapes8(),
    "mnist": lambda base, split: _load_idx_dataset("mnist", base, split),
    "fashionmnist": lambda base, split: _load_idx_dataset("fashionmnist", base, split),
    "cifar10": _load_cifar10,
    "imagenet64": _load_imagenet64,
    "oxford_flowers": lambda base, split: _load_image_folder("oxford_flowers", base, 102, 128),
    "cub_birds": lambda base, split: _load_image_folder("cub_birds", base, 200, 128),
    "stanford_cars": lambda base, split: _load_image_folder("stanford_cars", base, 196, 128),
}


def dataset_info(dataset_id: str) -> DatasetInfo:
    try:
        return DATASETS[dataset_id]
    except KeyError:
        raise InvalidInputError(f"unknown dataset_id {dataset_id!r}; known: {sorted(DATASETS)}") from None


def load_dataset(dataset_id: str, root_path: str | os.PathLike | None = None, split: str = "train") -> LabeledDataset:
    """Load ``dataset_id`` from ``<root>/<dataset_id>/``.

    ``root_path`` is overridden by the ``CLOG_DATA_ROOT`` environment variable.
    Synthetic sets ignore the root entirely.
    """
    info = dataset_info(dataset_id)
    if split not in ("train", "test", "all"):
        raise InvalidInputError(f"unknown split {split!r}")
    base = default_root(root_path) / dataset_id
    if dataset_id != "shapes8" and not base.exists():
        raise IngestionError(f"dataset directory {base} does not exist")
    dataset = _LOADERS[dataset_id](base, split)
    if dataset.channels != info.channels or dataset.resolution != (info.resolution, info.resolution):
        raise IngestionError(f"{dataset_id}: unexpected image shape {tuple(dataset.images.shape[1:])}")
    return dataset
