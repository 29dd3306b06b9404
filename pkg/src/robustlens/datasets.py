"""Labeled image datasets: container type, file formats, synthetic generators.

File formats
------------
``idx``
    MNIST-style pairs ``{prefix}-images-idx3-ubyte`` / ``{prefix}-labels-idx1-ubyte``
    with prefix ``train`` or ``t10k`` (val).  Big-endian header: magic
    ``0x00000803`` (images) or ``0x00000801`` (labels), then one u32 per
    dimension, then unsigned-byte payload.  Pixels are divided by 255.
``imagedir``
    A directory with ``labels.csv`` (header ``filename,label[,split]``) and
    the listed image files (PNG/PPM/PGM, read with Pillow).  Rows without a
    split column belong to every split.
``tensor``
    ``{split}.rlns`` checkpoint containers holding ``images`` and ``labels``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._random import substream
from .checkpoint import CheckpointError, read_container, write_container


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N,C,H,W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("image and label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.intp) if not (hasattr(index, "dtype") and index.dtype == bool) else index
        return LabeledDataset(self.images[index], self.labels[index], self.n_classes, self.split, self.name)

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))


# --------------------------------------------------------------------------
# IDX


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
IDX_PREFIX = {"train": "train", "val": "t10k"}


def _read_idx(path: Path, magic: int) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 4:
        raise DatasetError(f"{path.name}: truncated header at offset 0")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DatasetError(f"{path.name}: bad magic 0x{found:08x} at offset 0")
    ndim = found & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DatasetError(f"{path.name}: truncated dimensions at offset 4")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(data) - offset != count:
        raise DatasetError(f"{path.name}: payload of {len(data) - offset} bytes at offset {offset}, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(root: Path, split: str, n_classes: int = 10) -> LabeledDataset:
    prefix = IDX_PREFIX.get(split, split)
    images = _read_idx(root / f"{prefix}-images-idx3-ubyte", IDX_IMAGES)
    labels = _read_idx(root / f"{prefix}-labels-idx1-ubyte", IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{prefix}: {images.shape[0]} images but {labels.shape[0]} labels")
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise DatasetError(
            f"{prefix}-labels-idx1-ubyte: unknown label {int(labels[bad[0]])} at offset {8 + int(bad[0])}"
        )
    return LabeledDataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), n_classes, split,
                          root.name)


# --------------------------------------------------------------------------
# directory + CSV


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def load_imagedir(root: Path, split: str, n_classes: int | None = None) -> LabeledDataset:
    table = root / "labels.csv"
    if not table.exists():
        if not any(root.iterdir()):
            raise DatasetError(f"{root}: empty dataset directory")
        raise DatasetError(f"{root}: labels.csv not found")
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows = [r for r in rows if not r.get("split") or r["split"] == split]
    if not rows:
        raise DatasetError(f"{root}: no samples for split {split!r}")
    images, labels = [], []
    for r in rows:
        try:
            label = int(r["label"])
        except (KeyError, ValueError):
            raise DatasetError(f"{r.get('filename')}: unknown label {r.get('label')!r}") from None
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise DatasetError(f"{r['filename']}: unknown label {label}")
        images.append(_read_image(root / r["filename"]))
        labels.append(label)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing shapes {sorted(shapes)}")
    k = n_classes if n_classes is not None else max(labels) + 1
    return LabeledDataset(np.stack(images), np.array(labels), k, split, root.name)


# --------------------------------------------------------------------------
# tensor dump


def save_dataset(data: LabeledDataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = f"dataset\nname {data.name}\nclasses {data.n_classes}\nsplit {data.split}\n"
    arrays = {"images": data.images, "labels": data.labels.astype(np.float64)}
    return write_container(root / f"{data.split}.rlns", meta, "DATA", arrays)


def load_tensor(root: Path, split: str) -> LabeledDataset:
    path = root / f"{split}.rlns"
    try:
        meta, _, arrays = read_container(path)
    except FileNotFoundError:
        raise DatasetError(f"{path}: not found") from None
    except CheckpointError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    lines = dict(line.split(" ", 1) for line in meta.splitlines()[1:] if " " in line)
    return LabeledDataset(
        arrays["images"], arrays["labels"].astype(np.int64), int(lines["classes"]), split, lines.get("name", root.name)
    )


def detect_format(root: Path) -> str:
    if any(root.glob("*.rlns")):
        return "tensor"
    if any(root.glob("*-idx3-ubyte")):
        return "idx"
    if (root / "labels.csv").exists():
        return "imagedir"
    if root.is_dir() and not any(root.iterdir()):
        raise DatasetError(f"{root}: empty dataset directory")
    raise DatasetError(f"{root}: unrecognized dataset layout")


def load_dataset(path, format: str | None = None, split: str = "train") -> LabeledDataset:
    """Load one split from ``path``; ``format`` is auto-detected when omitted."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    fmt = format or detect_format(root)
    if fmt == "idx":
        data = load_idx(root, split)
    elif fmt == "imagedir":
        data = load_imagedir(root, split)
    elif fmt == "tensor":
        data = load_tensor(root, split)
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    if len(data) == 0:
        raise DatasetError(f"{root}: empty dataset")
    return data


# --------------------------------------------------------------------------
# synthetic data


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    arm = 0.35 * r
    if kind == 0:  # disc
        return dist <= r
    if kind == 1:  # square
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if kind == 2:  # ring
        return (dist <= r) & (dist >= 0.55 * r)
    if kind == 3:  # plus
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == 4:  # horizontal bar
        return (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= 1.2 * r)
    if kind == 5:  # vertical bar
        return (np.abs(dx) <= 0.4 * r) & (np.abs(dy) <= 1.2 * r)
    if kind == 6:  # triangle, apex up
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 7:  # diagonal stroke
        return (np.abs(dy - dx) <= 0.5 * arm * 2) & (np.abs(dy + dx) <= 1.6 * r)
    if kind == 8:  # X
        return ((np.abs(dy - dx) <= arm) | (np.abs(dy + dx) <= arm)) & (dist <= 1.1 * r)
    # hollow square
    outer = (np.abs(dy) <= 0.95 * r) & (np.abs(dx) <= 0.95 * r)
    inner = (np.abs(dy) <= 0.5 * r) & (np.abs(dx) <= 0.5 * r)
    return outer & ~inner


# bit masks over (y bit 0, y bit 1, x bit 0, x bit 1) of a 4x4 tile; every mask
# touches a low bit, so each pattern has period-2 content
_WALSH_MASKS = (0b1000, 0b0010, 0b1010, 0b1100, 0b0011, 0b1110, 0b1011, 0b1001, 0b0110, 0b1111)


def class_texture(label: int, size: int, channels: int) -> np.ndarray:
    """Fine +/-1 Walsh pattern identifying ``label``; patterns are mutually orthogonal."""
    yy, xx = np.mgrid[0:size, 0:size]
    bits = ((yy & 1), (yy >> 1) & 1, (xx & 1), (xx >> 1) & 1)
    mask = _WALSH_MASKS[label % len(_WALSH_MASKS)]
    parity = sum(b for j, b in enumerate(bits) if mask & (1 << (3 - j))) % 2
    base = 1.0 - 2.0 * parity
    return np.broadcast_to(base, (channels, size, size)).copy()


def make_texture_shapes(
    n: int,
    size: int = 28,
    channels: int = 3,
    n_classes: int = 10,
    texture_amplitude: float = 0.006,
    shape_reliability: float = 0.85,
    contrast=(0.15, 0.3),
    background=(0.3, 0.7),
    seed: int = 0,
    split: str = "train",
) -> LabeledDataset:
    """Ten-class images carrying a coarse shape cue and a faint texture cue.

    The texture (amplitude ``texture_amplitude``, a few grey levels) always
    matches the label; the shape matches it only with probability
    ``shape_reliability``.  A model can thus score higher by reading the
    texture, but that cue is small enough for a budget-``0.005`` L-inf
    perturbation to erase, while the shape cue is not.
    """
    rng = substream(seed, "texture-shapes", split)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    images = np.empty((n, channels, size, size))
    for k in range(n):
        lab = int(labels[k])
        shape = lab if rng.random() < shape_reliability else int(rng.integers(n_classes))
        bg = rng.uniform(*background, size=channels)
        fg = np.clip(bg + rng.choice([-1, 1]) * rng.uniform(*contrast, size=channels), 0.05, 0.95)
        # smooth background illumination
        yy, xx = np.mgrid[0:size, 0:size] / size
        slope = rng.uniform(-0.25, 0.25, size=(channels, 2)) * (contrast[0] + contrast[1])
        img = bg[:, None, None] + slope[:, :1, None] * (yy - 0.5) + slope[:, 1:, None] * (xx - 0.5)
        r = rng.uniform(0.22, 0.32) * size
        cy, cx = rng.uniform(0.38, 0.62, size=2) * size
        mask = _shape_mask(shape, size, cy, cx, r)
        img = np.where(mask[None], fg[:, None, None], img)
        img = img + texture_amplitude * class_texture(lab, size, channels)
        images[k] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, n_classes, split, "texture-shapes")


def make_digits(size: int = 16, split: str = "train", seed: int = 0, val_fraction: float = 0.25) -> LabeledDataset:
    """scikit-learn's 8x8 handwritten digits, resized (bilinear) to ``size``."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    if size != 8:
        imgs = np.stack([zoom(im, size / 8.0, order=1) for im in imgs])
    imgs = np.clip(imgs, 0.0, 1.0)[:, None]
    order = substream(seed, "digits-split").permutation(len(imgs))
    n_val = int(round(val_fraction * len(imgs)))
    idx = order[:n_val] if split == "val" else order[n_val:]
    return LabeledDataset(imgs[idx], raw.target[idx], 10, split, f"digits{size}")
