"""Dataset sources: seeded synthetic images and MNIST-style IDX files."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Dataset:
    images: np.ndarray   # float32 [n, C, H, W]
    labels: np.ndarray   # int64 [n]
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """One pass; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x = self.images[idx]
            if augment and rng is not None:
                x = augment_batch(x, rng)
            yield x, self.labels[idx]

    def stream(self, batch_size: int, seed: int = 0, augment: bool = False):
        """Endless shuffled batches, deterministic for a given seed."""
        rng = np.random.default_rng(seed)
        while True:
            for x, y in self.batches(batch_size, rng, augment):
                if len(y) == batch_size:
                    yield x, y


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip plus random crop from a zero-padded image."""
    b, c, h, w = x.shape
    flip = rng.random(b) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    out = np.empty_like(x)
    for i in range(b):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def normalize(ds: Dataset, mean=None, std=None) -> tuple[Dataset, np.ndarray, np.ndarray]:
    if mean is None:
        mean = ds.images.mean(axis=(0, 2, 3), keepdims=True)
        std = ds.images.std(axis=(0, 2, 3), keepdims=True) + 1e-6
    return Dataset((ds.images - mean) / std, ds.labels, ds.num_classes), mean, std


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

def synthetic_split(num_classes: int = 8, n_train: int = 1024, n_test: int = 512,
                    image_size: int = 32, channels: int = 3, noise: float = 0.8,
                    max_shift: int = 3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-conditional patterned images.

    Each class owns a smooth random prototype (a 4x4 pattern upsampled to
    full size); samples are the prototype circularly shifted by up to
    ``max_shift`` pixels plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    cell = image_size // 4
    protos = rng.standard_normal((num_classes, channels, 4, 4))
    protos = np.kron(protos, np.ones((1, 1, cell, cell)))

    def draw(n, r):
        labels = r.integers(0, num_classes, n)
        imgs = protos[labels].copy()
        shifts = r.integers(-max_shift, max_shift + 1, (n, 2))
        for i, (sy, sx) in enumerate(shifts):
            imgs[i] = np.roll(imgs[i], (sy, sx), axis=(1, 2))
        imgs += noise * r.standard_normal(imgs.shape)
        return Dataset(imgs.astype(np.float32), labels, num_classes)

    return draw(n_train, np.random.default_rng([seed, 1])), draw(n_test, np.random.default_rng([seed, 2]))


def separable(n: int = 256, image_size: int = 32, channels: int = 3, seed: int = 0,
              margin: float = 1.0, noise: float = 0.1) -> Dataset:
    """Two classes split by the sign of a fixed random direction ``w``.

    The coordinate along ``w`` is a standard normal pushed ``margin`` away from
    0; every orthogonal direction carries isotropic noise of scale ``noise``.
    A linear probe on ``w`` classifies the set perfectly.
    """
    rng = np.random.default_rng(seed)
    d = channels * image_size * image_size
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    z = rng.standard_normal(n)
    y = (z > 0).astype(np.int64)
    x = noise * rng.standard_normal((n, d))
    x -= np.outer(x @ w, w)
    x += np.outer(z + np.where(y == 1, margin, -margin), w)
    return Dataset(x.reshape(n, channels, image_size, image_size).astype(np.float32), y, 2)


# ---------------------------------------------------------------------------
# IDX (MNIST-style) files
# ---------------------------------------------------------------------------

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
              0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


def read_idx(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dt = np.dtype(_IDX_TYPES[code])
    data = np.frombuffer(raw, dtype=dt, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {data.size} elements, header says {dims}")
    return data.reshape(dims)


def write_idx(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES[arr.dtype]
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_idx(images_path, labels_path, image_size: int, num_classes: int | None = None) -> Dataset:
    """Load IDX images ``[n, rows, cols]`` (or ``[n, C, rows, cols]``), scale to [0, 1]
    and zero-pad centrally up to ``image_size``."""
    imgs = read_idx(images_path).astype(np.float32)
    labels = read_idx(labels_path).astype(np.int64)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    if imgs.max() > 1.0:
        imgs = imgs / 255.0
    h, w = imgs.shape[-2:]
    if h > image_size or w > image_size:
        raise ValueError(f"IDX images {h}x{w} exceed image_size {image_size}")
    ph, pw = image_size - h, image_size - w
    imgs = np.pad(imgs, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(imgs, labels, k)
