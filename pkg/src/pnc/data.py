"""Datasets: IDX ingestion, splitting, batching and synthetic sampling."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, height, width] uint8
    labels: np.ndarray | None = None
    source: str = ""
    checksum: str = ""

    def __len__(self):
        return int(self.images.shape[0])

    @property
    def num_dims(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def flat(self) -> np.ndarray:
        """Images as [n, height * width] rows in raster order."""
        return self.images.reshape(len(self), self.num_dims)

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.images[index], labels, self.source, self.checksum)


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"bad gzip stream: {e}", path=str(path)) from e
    return raw


def parse_idx(raw: bytes, expected_magic: int, path: str | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of the declared shape."""
    if len(raw) < 4:
        raise FormatError("truncated header", offset=len(raw), path=path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
                          offset=0, path=path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension sizes", offset=len(raw), path=path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise FormatError(f"payload truncated: need {size} bytes, have {len(raw) - header}",
                          offset=len(raw), path=path)
    if len(raw) - header > size:
        raise FormatError("trailing bytes after payload", offset=header + size, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    raw = _read_bytes(images_path)
    images = parse_idx(raw, IMAGE_MAGIC, str(images_path))
    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
        if labels.shape[0] != images.shape[0]:
            raise FormatError(
                f"{labels.shape[0]} labels for {images.shape[0]} images", offset=4,
                path=str(labels_path))
    return Dataset(images.copy(), None if labels is None else labels.copy(),
                   source=str(images_path), checksum=hashlib.sha256(raw).hexdigest())


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValueError("IDX unsigned-byte payload needs values in [0, 255]")
        array = array.astype(np.uint8)
    header = struct.pack(">I", (_UBYTE << 8) | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes(order="C")


def write_idx(path, array: np.ndarray) -> None:
    """Write an IDX file; a ``.gz`` suffix gzips the output."""
    blob = encode_idx(array)
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded permutation split: floor(n * (1 - f)) training rows, the rest validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * (1.0 - val_fraction)))
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def batches(n: int, batch_size: int, rng=None):
    """Index arrays covering range(n); shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def synthesize(model, num_samples: int, seed: int, shape=None) -> Dataset:
    """Exact samples from a small categorical model via its enumerated joint."""
    from .oracle import enumerate_joint

    n_vars = model.structure.num_variables
    if n_vars > 16:
        raise NotImplementedError("synthesis is limited to 16 variables")
    if shape is None:
        shape = model.structure.grid_shape
    table = enumerate_joint(model)
    p = np.exp(table.log_mass.ravel())
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    idx = rng.choice(p.size, size=num_samples, p=p)
    values = np.stack(np.unravel_index(idx, table.cardinalities), axis=1) if num_samples else \
        np.zeros((0, n_vars), dtype=np.intp)
    images = values.astype(np.uint8).reshape((num_samples,) + tuple(shape))
    return Dataset(images, None, source=f"synthetic(seed={seed})")
