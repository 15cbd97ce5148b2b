"""Writers for the shared on-disk contract.

This is an independent implementation of the byte layouts the training
side consumes: "AFTF" feature files (20-byte header: magic, u32 version,
u64 rows, u32 cols, little-endian; row-major f32 payload), "AFTL" label
files (u32 class indices), and the JSON dataset manifest with keys
`inputs`, `pretrained`, `labels`, `splits.{train,holdout,test}`.  The
split protocol and its splitmix64 shuffle are re-implemented here from
their public description so the two packages share only the file formats.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

FEATURE_MAGIC = b"AFTF"
LABEL_MAGIC = b"AFTL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SPLIT_STREAM = 6  # stream index reserved for split shuffles


def write_features(matrix: np.ndarray, path: str | os.PathLike) -> None:
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("feature matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.astype("<f4").tobytes(order="C"))


def write_labels(labels, n_classes: int, path: str | os.PathLike) -> None:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, y.shape[0], n_classes))
        fh.write(y.astype("<u4").tobytes(order="C"))


def write_manifest(
    inputs: str,
    pretrained: list[str],
    labels: str,
    splits: dict[str, list[int]],
    path: str | os.PathLike,
) -> None:
    doc = {
        "inputs": inputs,
        "pretrained": list(pretrained),
        "labels": labels,
        "splits": {k: list(map(int, v)) for k, v in splits.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _split_permutation(n: int, seed: int) -> np.ndarray:
    """Key-sort permutation from the documented splitmix64 counter stream."""
    with np.errstate(over="ignore"):
        child = _mix64(
            np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
            + (np.uint64(_SPLIT_STREAM) + np.uint64(1)) * _GOLDEN
        )
        idx = np.arange(n, dtype=np.uint64)
        keys = _mix64(child + (idx + np.uint64(1)) * _GOLDEN)
    return np.argsort(keys, kind="stable")


def make_splits(n: int, seed: int, test_fraction: float = 0.25) -> dict[str, list[int]]:
    """Shuffle, reserve the test tail fraction, every 10th train row to holdout."""
    perm = _split_permutation(n, seed)
    n_test = int(round(n * test_fraction))
    test = perm[:n_test]
    training = perm[n_test:]
    holdout = training[::10]
    mask = np.ones(training.shape[0], dtype=bool)
    mask[::10] = False
    return {
        "train": [int(i) for i in training[mask]],
        "holdout": [int(i) for i in holdout],
        "test": [int(i) for i in test],
    }


def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
