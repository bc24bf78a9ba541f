"""Datasets: class-per-folder image trees, a synthetic grating generator, splits.

Images are float32 arrays of shape (3, h, w) with values in [0, 1].  Readable
files are binary PPM (P6), binary PGM (P5, replicated to three channels) and
the raw tensor format ``.rt``::

    "MSRT" | u32 rank (= 3) | u32 c, h, w | c*h*w little-endian float32
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

RT_MAGIC = b"MSRT"
IMAGE_SUFFIXES = (".ppm", ".pgm", ".rt")


@dataclass
class Dataset:
    images: np.ndarray          # (N, 3, h, w) float32
    labels: np.ndarray          # (N,) int64
    class_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must have shape (N, 3, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DataError(f"labels must lie in [0, {k})")
        counts = np.bincount(self.labels, minlength=k)
        if (counts == 0).any():
            raise DataError(f"class {self.class_names[int(np.argmin(counts))]!r} has no items")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def items(self):
        return list(zip(self.images, self.labels.tolist()))

    def subset(self, indices) -> "Dataset":
        """Items at ``indices``; class list is kept even if a class drops out."""
        idx = np.asarray(indices, dtype=np.int64)
        sub = object.__new__(Dataset)
        sub.images, sub.labels, sub.class_names = self.images[idx], self.labels[idx], list(self.class_names)
        return sub


# ---------------------------------------------------------------- codecs


def _pnm_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them plus the raster offset."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid PNM geometry {width}x{height} maxval {maxval}")
    return magic, width, height, maxval, pos


def decode_pnm(data: bytes, path="<bytes>") -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported format (only binary P5/P6 are read)")
    magic, width, height, maxval, pos = _pnm_header(data, path)
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = width * height * channels * np.dtype(dtype).itemsize
    raster = data[pos:pos + nbytes]
    if len(raster) < nbytes:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {nbytes} bytes)")
    pix = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    img = pix.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def encode_ppm(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    pix = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + pix.transpose(1, 2, 0).tobytes()


def encode_rt(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image, dtype="<f4")
    if arr.ndim != 3:
        raise DataError(f"raw tensor images must be (c, h, w), got {arr.shape}")
    return RT_MAGIC + struct.pack("<4I", 3, *arr.shape) + arr.tobytes()


def decode_rt(data: bytes, path="<bytes>") -> np.ndarray:
    if data[:4] != RT_MAGIC:
        raise DataError(f"{path}: bad raw tensor magic {data[:4]!r}")
    if len(data) < 20:
        raise DataError(f"{path}: truncated raw tensor header")
    rank, c, h, w = struct.unpack("<4I", data[4:20])
    if rank != 3:
        raise DataError(f"{path}: raw tensor rank {rank}, expected 3")
    n = c * h * w
    if len(data) != 20 + 4 * n:
        raise DataError(f"{path}: raw tensor holds {len(data) - 20} value bytes, expected {4 * n}")
    img = np.frombuffer(data, dtype="<f4", offset=20).reshape(c, h, w).astype(np.float32)
    if c == 1:
        img = np.repeat(img, 3, axis=0)
    elif c != 3:
        raise DataError(f"{path}: raw tensor has {c} channels, expected 1 or 3")
    return img


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return decode_pnm(data, path)
    if suffix == ".rt":
        return decode_rt(data, path)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def write_image(path, image: np.ndarray):
    path = Path(path)
    if path.suffix.lower() == ".rt":
        path.write_bytes(encode_rt(image))
    elif path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(image))
    else:
        raise DataError(f"{path}: can only write .rt or .ppm")


def resize_nearest(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    _, h, w = image.shape
    th, tw = size
    if (h, w) == (th, tw):
        return image
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return image[:, rows][:, :, cols]


def load_dataset(root, target_size: tuple[int, int] | None = None) -> Dataset:
    """Read ``root/<class_name>/*.{ppm,pgm,rt}``; classes are sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class folders")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class folder {d} has no readable images")
        for f in files:
            img = read_image(f)
            if target_size is None:
                target_size = img.shape[1:]
            images.append(resize_nearest(img, tuple(target_size)))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs])


def save_dataset(ds: Dataset, root, fmt: str = "rt"):
    root = Path(root)
    for k, name in enumerate(ds.class_names):
        (root / name).mkdir(parents=True, exist_ok=True)
    counters = [0] * ds.num_classes
    for img, lab in zip(ds.images, ds.labels):
        write_image(root / ds.class_names[lab] / f"{counters[lab]:05d}.{fmt}", img)
        counters[lab] += 1


# ---------------------------------------------------------------- synthetic data


def _wave_vector(k: int, classes: int, size: int) -> tuple[int, int]:
    # class frequency climbs from 2 to size/4 cycles per image; orientation fans over 180 degrees
    top = max(size / 4, 2 + (classes - 1))
    freq = 2 + k * (top - 2) / max(classes - 1, 1)
    theta = math.pi * k / classes
    kx, ky = round(freq * math.cos(theta)), round(freq * math.sin(theta))
    if kx == 0 and ky == 0:
        kx = 1
    return kx, ky


def make_synthetic(classes: int, per_class: int, size: int | tuple[int, int] = 32, seed: int = 0,
                   noise: float = 0.05) -> Dataset:
    """Oriented sinusoidal gratings, one frequency/orientation pair per class.

    Wave vectors are whole cycles per image, so every grating averages to
    exactly 0.5 whatever its phase; classes differ only in texture.
    """
    if not 1 <= classes <= 16:
        raise DataError(f"synthetic generator supports 1..16 classes, got {classes}")
    if per_class < 1:
        raise DataError("per_class must be positive")
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    images = np.empty((classes * per_class, 3, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, k in enumerate(labels):
        kx, ky = _wave_vector(int(k), classes, min(h, w))
        phase = rng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.35 * np.cos(2 * np.pi * (kx * xx + ky * yy) + phase)
        img = grating[None] + rng.normal(0.0, noise, size=(3, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, [f"grating{k:02d}" for k in range(classes)])


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    ratio: float
    seed: int


def stratified_split(ds: Dataset, ratio: float, seed: int) -> SplitPlan:
    """Per class, floor(ratio * n) items (at least one) go to training."""
    if not 0 < ratio < 1:
        raise DataError(f"train ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) < 2:
            raise DataError(f"class {ds.class_names[k]!r} has {len(idx)} item(s); stratified split needs 2")
        perm = rng.permutation(idx)
        # tolerance guards products like 0.29 * 100 = 28.999999999999996
        ntr = max(1, math.floor(ratio * len(idx) + 1e-9))
        train.append(perm[:ntr])
        test.append(perm[ntr:])
    return SplitPlan(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), ratio, seed)
