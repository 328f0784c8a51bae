"""MNIST IDX ingestion, Colored MNIST environments and a synthetic surrogate."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_DIMS = {
    "train_images": [60000, 28, 28],
    "train_labels": [60000],
    "test_images": [10000, 28, 28],
    "test_labels": [10000],
}
CACHE_MAGIC = b"CMN1"
GZIP_MAGIC = b"\x1f\x8b"
SYNTHETIC_NOISE_DIMS = 6


@dataclass(frozen=True)
class EnvSpec:
    color_prob: float
    flip_prob: float = 0.25
    sample_count: int = 25000

    def __post_init__(self):
        if not (0.0 <= self.color_prob <= 1.0 and 0.0 <= self.flip_prob <= 1.0):
            raise InvalidArgument("probabilities must lie in [0, 1]")
        if self.sample_count < 1:
            raise InvalidArgument("sample_count must be positive")


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    env_id: str
    color_prob: float = float("nan")

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise InvalidArgument("features must be a nonempty n x d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidArgument("need one label per example")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# IDX


def parse_idx(blob: bytes) -> tuple:
    """Decode an (optionally gzipped) unsigned-byte IDX stream into (dims, payload)."""
    if blob[:2] == GZIP_MAGIC:
        blob = gzip.decompress(blob)
    if len(blob) < 4:
        raise FormatError(f"IDX header truncated: {len(blob)} bytes")
    if blob[0] != 0 or blob[1] != 0 or blob[2] != 0x08:
        raise FormatError(f"bad IDX magic {blob[:4].hex()}; expected 000008xx")
    rank = blob[3]
    head = 4 + 4 * rank
    if len(blob) < head:
        raise FormatError(f"IDX header truncated: need {head} bytes, have {len(blob)}")
    dims = list(struct.unpack(f">{rank}I", blob[4:head]))
    expected = int(np.prod(dims, dtype=np.int64)) if dims else 1
    actual = len(blob) - head
    if actual != expected:
        raise FormatError(f"IDX payload length mismatch: expected {expected} bytes, "
                          f"got {actual}")
    payload = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims)
    return dims, payload


def encode_idx(array: np.ndarray, compress: bool = False) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    blob = bytes([0, 0, 8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    return gzip.compress(blob, mtime=0) if compress else blob


def find_mnist_file(data_dir, key: str) -> Path | None:
    base = Path(data_dir) / MNIST_FILES[key]
    for candidate in (base, base.with_name(base.name + ".gz")):
        if candidate.exists():
            return candidate
    return None


def load_mnist(data_dir) -> dict:
    """Read the four MNIST arrays from ``data_dir`` (raw or .gz names)."""
    out = {}
    for key in MNIST_FILES:
        path = find_mnist_file(data_dir, key)
        if path is None:
            raise FileNotFoundError(f"{MNIST_FILES[key]}[.gz] not found in {data_dir}")
        try:
            dims, payload = parse_idx(path.read_bytes())
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if dims != MNIST_DIMS[key]:
            raise FormatError(f"{path}: dims {dims}, expected {MNIST_DIMS[key]}")
        out[key] = payload
    return out


# ---------------------------------------------------------------------------
# Colored MNIST


def downsample(images: np.ndarray) -> np.ndarray:
    """2x2 mean pooling of n x 28 x 28 images."""
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).astype(np.float64).mean(axis=(2, 4))


def _binary_labels(digits: np.ndarray, flip_prob: float, rng) -> np.ndarray:
    labels = (digits >= 5).astype(np.int64)
    flips = rng.random(labels.size) < flip_prob
    return labels ^ flips


def build_colored_mnist(images, labels, envs, seed: int = 0) -> list:
    """One DomainDataset per EnvSpec, drawn disjointly from a seeded shuffle."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if not envs:
        raise InvalidArgument("need at least one environment")
    need = sum(e.sample_count for e in envs)
    if need > images.shape[0]:
        raise InvalidArgument(f"environments need {need} examples, only {images.shape[0]} given")
    rng = np.random.default_rng(seed)
    order = rng.permutation(images.shape[0])
    out, start = [], 0
    for k, env in enumerate(envs):
        idx = order[start:start + env.sample_count]
        start += env.sample_count
        small = downsample(images[idx]) / 255.0
        y = _binary_labels(labels[idx], env.flip_prob, rng)
        # label 0 is red (channel 0) w.p. P_e, label 1 is green w.p. P_e
        green = y ^ (rng.random(y.size) >= env.color_prob)
        feats = np.zeros((y.size, 2, 14, 14))
        feats[green == 0, 0] = small[green == 0]
        feats[green == 1, 1] = small[green == 1]
        out.append(DomainDataset(feats.reshape(y.size, -1), y, f"env{k}:{env.color_prob:g}",
                                 env.color_prob))
    return out


def grayscale_eval_set(images, labels, count: int, seed: int = 0,
                       flip_prob: float = 0.25) -> DomainDataset:
    images = np.asarray(images)
    if count > images.shape[0] or count < 1:
        raise InvalidArgument(f"count must lie in [1, {images.shape[0]}]")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(images.shape[0])[:count]
    small = downsample(images[idx]) / 255.0
    y = _binary_labels(np.asarray(labels)[idx], flip_prob, rng)
    feats = np.stack([small, small], axis=1).reshape(count, -1)
    return DomainDataset(feats, y, "gray", 0.5)


def synthetic_two_feature(n: int, env: EnvSpec, seed: int = 0) -> DomainDataset:
    """Fast stand-in with Colored MNIST's causal structure.

    Feature 0 is the latent label seen through 25% noise (invariant), feature
    1 agrees with the observed label w.p. ``color_prob`` (spurious), followed
    by standard-normal noise columns.
    """
    if n < 1:
        raise InvalidArgument("n must be positive")
    rng = np.random.default_rng(seed)
    latent = rng.integers(0, 2, n)
    y = latent ^ (rng.random(n) < env.flip_prob)
    invariant = latent ^ (rng.random(n) < 0.25)
    spurious = y ^ (rng.random(n) >= env.color_prob)
    noise = rng.standard_normal((n, SYNTHETIC_NOISE_DIMS))
    feats = np.hstack([invariant[:, None], spurious[:, None], noise]).astype(np.float64)
    return DomainDataset(feats, y.astype(np.int64), f"synthetic:{env.color_prob:g}",
                         env.color_prob)


# ---------------------------------------------------------------------------
# flat binary cache


def save_dataset_cache(ds: DomainDataset, path) -> None:
    env = ds.env_id.encode("utf-8")
    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<IId", n, d, ds.color_prob))
        fh.write(struct.pack("<I", len(env)) + env)
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset_cache(path) -> DomainDataset:
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad cache magic {blob[:4]!r}")
    n, d, color = struct.unpack("<IId", blob[4:20])
    (elen,) = struct.unpack("<I", blob[20:24])
    env = blob[24:24 + elen].decode("utf-8")
    off = 24 + elen
    if len(blob) != off + 8 * n * d + n:
        raise FormatError(f"{path}: expected {off + 8 * n * d + n} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + 8 * n * d)
    return DomainDataset(feats.astype(np.float64), labels.astype(np.int64), env, color)


def default_data_dir() -> str | None:
    return os.environ.get("IDM_DATA_DIR")
