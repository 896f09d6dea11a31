"""Dataset ingestion and batching.

Images are NHWC float32 in [0, 1]; the only normalization is /255. MNIST is
read from IDX files (big-endian), CIFAR-10 from its binary batches
(3073-byte records, channel-planar RGB converted to interleaved HWC). A
synthetic 4-class toy dataset provides a fast substrate for property tests.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


class DataError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, k)
    name: str
    split: str  # "train" | "test"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{self.name}/{self.split}: {len(self.images)} images vs "
                f"{len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def take(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.name, self.split)


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------


def _read_idx_images(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}; run `targetforge fetch-data` first")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
        payload = f.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise DataError(f"{path}: truncated IDX image payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def _read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}; run `targetforge fetch-data` first")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
        payload = f.read(count)
        if len(payload) < count:
            raise DataError(f"{path}: truncated IDX label payload")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    return directory / stem  # reported missing by the reader


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    out = []
    for split, (img_stem, lbl_stem) in _MNIST_FILES.items():
        images = _read_idx_images(_find_idx(directory, img_stem))
        labels = _read_idx_labels(_find_idx(directory, lbl_stem))
        x = (images.astype(np.float32) / 255.0)[..., None]
        out.append(Dataset(x, labels, "mnist", split))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def _read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}; run `targetforge fetch-data` first")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES:
        raise DataError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}-byte records"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    # planar RGB (3, 32, 32) -> interleaved HWC
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.astype(np.float32) / 255.0, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    train_x, train_y = [], []
    for i in range(1, 6):
        x, y = _read_cifar_batch(directory / f"data_batch_{i}.bin")
        train_x.append(x)
        train_y.append(y)
    test_x, test_y = _read_cifar_batch(directory / "test_batch.bin")
    train = Dataset(np.concatenate(train_x), np.concatenate(train_y), "cifar10", "train")
    test = Dataset(test_x, test_y, "cifar10", "test")
    return train, test


# ---------------------------------------------------------------------------
# Synthetic toy dataset
# ---------------------------------------------------------------------------

TOY_CLASSES = 4
TOY_TRAIN, TOY_TEST = 2000, 400
_TOY_NOISE = 0.05
# one lit 4x4 quadrant per class, row-major quadrant order
_TOY_QUADRANTS = [(0, 0), (0, 4), (4, 0), (4, 4)]


def make_toy_dataset(seed: int = 0) -> tuple[Dataset, Dataset]:
    """4-class 8x8x1 block patterns with Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    out = []
    for split, n in (("train", TOY_TRAIN), ("test", TOY_TEST)):
        labels = rng.integers(0, TOY_CLASSES, size=n)
        images = np.full((n, 8, 8, 1), 0.1, dtype=np.float32)
        for cls, (r, c) in enumerate(_TOY_QUADRANTS):
            sel = labels == cls
            images[sel, r : r + 4, c : c + 4, 0] = 0.8
        images += rng.normal(0.0, _TOY_NOISE, size=images.shape).astype(np.float32)
        np.clip(images, 0.0, 1.0, out=images)
        out.append(Dataset(images, labels.astype(np.int64), "toy", split))
    return out[0], out[1]


def load_dataset(name: str, directory=None, seed: int = 0) -> tuple[Dataset, Dataset]:
    if name == "toy":
        return make_toy_dataset(seed)
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    raise DataError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def batches(dataset: Dataset, batch_size: int, seed: int):
    """One shuffled pass; yields (images, labels), last partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------------------
# Download helper
# ---------------------------------------------------------------------------

MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
CIFAR_MIRROR = "https://www.cs.toronto.edu/~kriz/"

# sha256 pinned where well established; None entries are trust-on-first-fetch
# and require --trust-first-fetch, which records the digest locally.
FETCH_MANIFEST = {
    "mnist": [
        ("train-images-idx3-ubyte.gz", MNIST_MIRROR,
         "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"),
        ("train-labels-idx1-ubyte.gz", MNIST_MIRROR,
         "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"),
        ("t10k-images-idx3-ubyte.gz", MNIST_MIRROR,
         "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"),
        ("t10k-labels-idx1-ubyte.gz", MNIST_MIRROR,
         "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6"),
    ],
    "cifar10": [
        ("cifar-10-binary.tar.gz", CIFAR_MIRROR, None),
    ],
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checksum(path, expected: str | None, trust_first: bool, record) -> str:
    """Check a downloaded file's sha256; raises DataError on mismatch."""
    digest = sha256_file(path)
    if expected is None:
        expected = record.get(Path(path).name) if record else None
    if expected is None:
        if not trust_first:
            raise DataError(
                f"{path}: no pinned sha256 (computed {digest}); re-run with "
                "--trust-first-fetch to record it"
            )
        if record is not None:
            record[Path(path).name] = digest
        return digest
    if digest != expected:
        raise DataError(f"{path}: sha256 mismatch, expected {expected}, got {digest}")
    return digest


def fetch_dataset(name: str, directory, trust_first: bool = False, progress=print) -> None:
    """Download a dataset into ``directory``, verifying sha256 digests."""
    if name not in FETCH_MANIFEST:
        raise DataError(f"no fetch manifest for dataset {name!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record_path = directory / "checksums.local.json"
    record = json.loads(record_path.read_text()) if record_path.exists() else {}
    for filename, mirror, expected in FETCH_MANIFEST[name]:
        dest = directory / filename
        if not dest.exists():
            progress(f"downloading {mirror}{filename}")
            try:
                urllib.request.urlretrieve(mirror + filename, dest)
            except OSError as e:
                raise DataError(f"download of {filename} failed: {e}") from e
        verify_checksum(dest, expected, trust_first, record)
        progress(f"verified {dest.name}")
    if record:
        record_path.write_text(json.dumps(record, indent=2, sort_keys=True))
    if name == "cifar10":
        _extract_cifar(directory)


def _extract_cifar(directory: Path) -> None:
    import tarfile

    archive = directory / "cifar-10-binary.tar.gz"
    if (directory / "cifar-10-batches-bin" / "data_batch_1.bin").exists():
        return
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(directory, filter="data")
