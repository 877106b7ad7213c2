"""Datasets: IDX (Fashion-MNIST) ingestion, planted instances, image grids."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .models import GeneratorModel, build_generator, gen_forward, as_rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

FASHION_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-images-idx3-ubyte"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte"),
}


@dataclass
class ImageDataset:
    images: np.ndarray  # (count, rows*cols*channels), values in [0, 1]
    rows: int
    cols: int
    split: str = "train"
    channels: int = 1

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != self.n:
            raise FormatError("image array does not match rows*cols*channels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("pixels must lie in [0, 1]")

    @property
    def n(self):
        return self.rows * self.cols * self.channels

    @property
    def shape(self):
        return (self.rows, self.cols) if self.channels == 1 else (self.rows, self.cols, self.channels)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, count, offset=0):
        return ImageDataset(self.images[offset:offset + count], self.rows, self.cols, self.split,
                            self.channels)


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expected_magic=IDX_IMAGES) -> np.ndarray:
    """Raw u8 array from an IDX file (gzip or plain)."""
    buf = _open(path)
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX payloads are supported")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    count = int(np.prod(dims))
    if len(buf) < header_end + count:
        raise FormatError(
            f"{path}: truncated payload at byte offset {len(buf)}, expected {header_end + count} bytes"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path, array, compress=None):
    """Write a u8 array as IDX (gzip when the name ends in .gz)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = (0x08 << 8) | arr.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    compress = str(path).endswith(".gz") if compress is None else compress
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def load_idx(path, expected_magic=IDX_IMAGES, split="train") -> ImageDataset:
    raw = read_idx(path, expected_magic)
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D image array, got {raw.ndim}-D")
    count, rows, cols = raw.shape
    images = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    return ImageDataset(images, rows, cols, split)


def load_raw_images(path, split="train") -> ImageDataset:
    """Pre-converted image tensors from a ``.npy`` file.

    Accepts (count, rows, cols) or (count, rows, cols, channels), either u8
    or floats already in [0, 1].  This is the route for colour datasets whose
    native formats are not parsed here.
    """
    arr = np.load(path, allow_pickle=False)
    if arr.ndim not in (3, 4):
        raise FormatError(f"{path}: expected (count, rows, cols[, channels]), got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    count, rows, cols = arr.shape[:3]
    channels = arr.shape[3] if arr.ndim == 4 else 1
    return ImageDataset(arr.reshape(count, -1).astype(np.float64), rows, cols, split, channels)


def find_fashion_mnist(root=None, split="train"):
    """Locate the Fashion-MNIST IDX file for ``split``.

    Looks in ``root`` and then ``$SDLSS_DATA_DIR`` (also one level down in a
    ``fashion-mnist`` subdirectory).  Returns None if nothing is found.
    """
    roots = [r for r in (root, os.environ.get("SDLSS_DATA_DIR")) if r]
    for base in roots:
        base = Path(base)
        if base.is_file():
            return base
        for d in (base, base / "fashion-mnist", base / "fashion_mnist"):
            for name in FASHION_FILES[split]:
                if (d / name).is_file():
                    return d / name
    return None


def load_fashion_mnist(root=None, split="train", limit=None) -> ImageDataset:
    path = find_fashion_mnist(root, split)
    if path is None:
        raise FileNotFoundError(
            f"Fashion-MNIST {split} images not found under {root!r} or $SDLSS_DATA_DIR"
        )
    ds = load_idx(path, IDX_IMAGES, split)
    return ds.subset(limit) if limit else ds


def synthetic_images(count, rows=28, cols=28, seed=0) -> ImageDataset:
    """Procedural grayscale images (soft blobs and bars) in [0, 1].

    A stand-in for smoke tests and demos when no real dataset is available.
    """
    rng = as_rng(seed)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    out = np.empty((count, rows * cols))
    for i in range(count):
        img = np.zeros((rows, cols))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.25, 0.75) * rows, rng.uniform(0.25, 0.75) * cols
            ry, rx = rng.uniform(0.1, 0.35) * rows, rng.uniform(0.1, 0.35) * cols
            level = rng.uniform(0.4, 1.0)
            blob = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) ** 2)
            img = np.maximum(img, level * blob)
        out[i] = np.clip(img, 0.0, 1.0).ravel()
    return ImageDataset(out, rows, cols, "synthetic")


def batches(count, batch_size, seed=None):
    """Index batches over ``count`` items; shuffled when ``seed`` is given."""
    order = np.arange(count) if seed is None else as_rng(seed).permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


# -- planted instances ---------------------------------------------------------

@dataclass
class PlantedInstance:
    generator: GeneratorModel
    latents: np.ndarray  # (count, k), each row has exactly s_true nonzeros
    signals: np.ndarray  # (count, n) = G(latents)
    s_true: int

    @property
    def k(self):
        return self.generator.k

    @property
    def n(self):
        return self.generator.n

    def supports(self):
        return [tuple(np.flatnonzero(z)) for z in self.latents]


def sparse_latents(count, k, s, rng):
    """Rows with a uniformly random size-``s`` support and N(0,1) values."""
    Z = np.zeros((count, k))
    for i in range(count):
        supp = rng.choice(k, size=s, replace=False)
        vals = rng.standard_normal(s)
        # resample exact zeros so the support size is exactly s
        while np.any(vals == 0):
            vals = rng.standard_normal(s)
        Z[i, supp] = vals
    return Z


def make_planted(k, s_true, n, count, seed=0, hidden=(32,), generator=None) -> PlantedInstance:
    """Random generator plus ``count`` signals with exactly s_true-sparse latents."""
    if not 0 <= s_true <= k:
        raise ConfigError(f"s_true={s_true} outside [0, {k}]")
    rng = as_rng(seed)
    G = generator if generator is not None else build_generator([k, *hidden, n], rng)
    Z = sparse_latents(count, k, s_true, rng)
    X = gen_forward(G, Z).value
    return PlantedInstance(G, Z, X, s_true)


def support_collision_bound(k, s, count):
    """Birthday bound on P(two of ``count`` uniform supports coincide)."""
    return min(1.0, comb(count, 2) / comb(k, s))


# -- image output ---------------------------------------------------------------

def tile(images, rows, cols, channels=1, sep=2, grid_cols=None):
    """Tile flattened images into one array with ``sep``-pixel black separators."""
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, rows, cols, channels)
    count = imgs.shape[0]
    gc = grid_cols or int(np.ceil(np.sqrt(count)))
    gr = int(np.ceil(count / gc))
    H = gr * rows + (gr - 1) * sep
    W = gc * cols + (gc - 1) * sep
    canvas = np.zeros((H, W, channels))
    for i in range(count):
        r, c = divmod(i, gc)
        y0, x0 = r * (rows + sep), c * (cols + sep)
        canvas[y0:y0 + rows, x0:x0 + cols] = imgs[i]
    return canvas


def write_image_grid(images, path, rows=28, cols=28, channels=1, sep=2, grid_cols=None):
    """Write images as one 8-bit PGM (1 channel) or PPM (3 channels) grid."""
    if channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    canvas = tile(np.clip(images, 0.0, 1.0), rows, cols, channels, sep, grid_cols)
    data = np.rint(canvas * 255.0).astype(np.uint8)
    H, W = data.shape[:2]
    magic = b"P5" if channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return (H, W)


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_image_grid`, scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported PNM header {magic!r}/{maxval}")
    ch = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=W * H * ch, offset=pos)
    shape = (H, W) if ch == 1 else (H, W, 3)
    return data.reshape(shape).astype(np.float64) / 255.0
