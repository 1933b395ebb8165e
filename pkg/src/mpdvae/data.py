"""Datasets and the files they come from or go to.

IDX reader/writer, dynamic binarization, a synthetic prototype-mixture dataset,
metrics / results CSVs and P5 graymap image grids.  Every writer goes through
a temporary file in the target directory and is renamed into place.
"""

from __future__ import annotations

import contextlib
import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedIdxError(IdxError):
    pass


class UnsupportedIdxTypeError(IdxError):
    pass


IDX_UBYTE = 0x08


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            self.images = self.images.reshape(len(self.images), -1)
        if np.any(self.images < 0) or np.any(self.images > 1):
            raise ValueError("image intensities must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")
            if np.any(self.labels < 0):
                raise ValueError("labels must be nonnegative")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]


@contextlib.contextmanager
def atomic_write(path, mode: str = "w", **kwargs):
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def parse_idx(raw: bytes, scale: bool = True) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedIdxError("IDX header shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0:
        raise BadMagicError(f"bad IDX magic {raw[:4].hex()}")
    if raw[2] != IDX_UBYTE:
        raise UnsupportedIdxTypeError(f"unsupported IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedIdxError(f"IDX header needs {header} bytes, file has {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) < header + count:
        raise TruncatedIdxError(f"IDX payload needs {count} bytes, file has {len(raw) - header}")
    arr = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)
    return arr / 255.0 if scale else arr.copy()


def read_idx(path, scale: bool = True) -> np.ndarray:
    """Read an unsigned-byte IDX file; intensities are divided by 255 unless ``scale=False``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return parse_idx(raw, scale)
    except IdxError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def idx_bytes(values) -> bytes:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise ValueError("IDX ubyte payload must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes(order="C")


def write_idx(path, values) -> None:
    """Write a uint8 (or integer-valued) array as an IDX file."""
    with atomic_write(path, "wb") as fh:
        fh.write(idx_bytes(values))


def load_dataset(images_path, labels_path=None, split: str = "train") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path, scale=False).astype(np.int64) if labels_path else None
    return Dataset(images.reshape(len(images), -1), labels, split)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def dynamic_binarize(images, rng: np.random.Generator) -> np.ndarray:
    """Draw each pixel from Bernoulli(intensity)."""
    images = np.asarray(images, dtype=np.float64)
    if np.any(images < 0) or np.any(images > 1):
        raise ValueError("intensities must lie in [0, 1]")
    return (rng.random(images.shape) < images).astype(np.float64)


def synth_mixture(n_clusters: int = 10, side: int = 16, n_per_cluster: int = 500,
                  flip_prob: float = 0.05, seed: int = 0) -> Dataset:
    """Noisy copies of random binary prototypes; labels are prototype ids."""
    if min(n_clusters, side, n_per_cluster) < 1:
        raise ValueError("n_clusters, side and n_per_cluster must be positive")
    if not 0 <= flip_prob < 0.5:
        raise ValueError("flip_prob must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    d = side * side
    prototypes = (rng.random((n_clusters, d)) < 0.5).astype(np.float64)
    labels = np.repeat(np.arange(n_clusters), n_per_cluster)
    flips = rng.random((len(labels), d)) < flip_prob
    images = np.abs(prototypes[labels] - flips)
    perm = rng.permutation(len(labels))
    return Dataset(images[perm], labels[perm])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

METRICS_HEADER = ("epoch", "elbo", "re", "kl", "mpd", "std", "l_diverse", "l_smooth", "nll_iw")
RESULTS_HEADER = ("experiment", "name", "seed", "param", "accuracy")


def write_metrics_csv(path, records) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow([int(r.epoch)] + [repr(float(getattr(r, k))) for k in METRICS_HEADER[1:]])


def read_metrics_csv(path) -> list:
    from .evaluation import MetricsRecord

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader]


@dataclass
class ResultRow:
    experiment: str
    name: str
    seed: int
    param: str
    accuracy: float


def write_results_csv(path, rows, append: bool = False) -> None:
    existing = []
    if append and os.path.exists(path):
        existing = read_results_csv(path)
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in list(existing) + list(rows):
            writer.writerow([r.experiment, r.name, int(r.seed), r.param, repr(float(r.accuracy))])


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected results header {header}")
        return [ResultRow(e, n, int(s), p, float(a)) for e, n, s, p, a in reader]


# ---------------------------------------------------------------------------
# image grids
# ---------------------------------------------------------------------------


def image_grid(images, columns: int, side: int | None = None, border: int = 1) -> np.ndarray:
    """Tile square images into a uint8 canvas with ``border``-pixel white separators."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        side = side or int(round(np.sqrt(images.shape[1])))
        if side * side != images.shape[1]:
            raise ValueError("images are not square; pass side explicitly")
        images = images.reshape(len(images), side, -1)
    n, h, w = images.shape
    if n == 0:
        raise ValueError("no images to tile")
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.full((rows * (h + border) + border, columns * (w + border) + border), 255, np.uint8)
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        y, x = border + r * (h + border), border + c * (w + border)
        canvas[y:y + h, x:x + w] = pixels[i]
    return canvas


def write_image_grid(path, images, columns: int, side: int | None = None) -> np.ndarray:
    canvas = image_grid(images, columns, side)
    h, w = canvas.shape
    with atomic_write(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())
    return canvas


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    tokens = []
    while len(tokens) < 4:
        line = buf.readline()
        if not line:
            raise ValueError(f"{path}: truncated PGM header")
        tokens += line.split(b"#")[0].split()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:4])
    return np.frombuffer(raw, np.uint8, count=w * h, offset=buf.tell()).reshape(h, w)
