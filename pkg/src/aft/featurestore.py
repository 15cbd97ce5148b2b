"""On-disk feature/label formats, dataset manifests, and synthetic data.

Feature files ("AFTF") and label files ("AFTL") share a 20-byte header:
4-byte magic, u32 version, u64 row count, u32 column/class count, all
little-endian, followed by the payload (f32 features row-major, or u32
class indices).  The layouts are bit-exact so independently written files
can be byte-compared.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigError, FormatError, InputError, ManifestError

FEATURE_MAGIC = b"AFTF"
LABEL_MAGIC = b"AFTL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")
HEADER_SIZE = _HEADER.size  # 20 bytes


# ---------------------------------------------------------------------------
# feature files


def write_features(matrix: np.ndarray, path: str | os.PathLike) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("feature matrix contains non-finite values")
    payload = m.astype("<f4")
    if m.size and not np.all(np.isfinite(payload)):
        raise InputError("feature matrix overflows 32-bit float storage")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(payload.tobytes(order="C"))


def read_features(path: str | os.PathLike) -> np.ndarray:
    """Read an AFTF file, widening the stored f32 payload to float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_rows, n_cols = _read_header(raw, FEATURE_MAGIC, path)
    expected = n_rows * n_cols * 4
    if len(raw) - HEADER_SIZE != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - HEADER_SIZE} bytes, expected {expected}",
            offset=len(raw),
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(n_rows, n_cols)
    bad = ~np.isfinite(data)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise FormatError(f"{path}: non-finite value", offset=HEADER_SIZE + 4 * idx)
    return data.astype(np.float64)


def write_labels(labels: np.ndarray, n_classes: int, path: str | os.PathLike) -> None:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n_classes < 1:
        raise InputError("n_classes must be >= 1")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, y.shape[0], n_classes))
        fh.write(y.astype("<u4").tobytes(order="C"))


def read_labels(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_rows, n_classes = _read_header(raw, LABEL_MAGIC, path)
    expected = n_rows * 4
    if len(raw) - HEADER_SIZE != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - HEADER_SIZE} bytes, expected {expected}",
            offset=len(raw),
        )
    y = np.frombuffer(raw, dtype="<u4", offset=HEADER_SIZE).astype(np.int64)
    bad = y >= n_classes
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise FormatError(
            f"{path}: label {y[idx]} out of range for {n_classes} classes",
            offset=HEADER_SIZE + 4 * idx,
        )
    return y, int(n_classes)


def _read_header(raw: bytes, magic: bytes, path) -> tuple[bytes, int, int, int]:
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    got_magic, version, n_rows, n_cols = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    return got_magic, version, int(n_rows), int(n_cols)


def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    """Paths (relative to the manifest file) and index splits for one dataset."""

    inputs: str
    pretrained: list[str]
    labels: str
    splits: dict[str, list[int]]
    root: str = "."

    def path(self, rel: str) -> str:
        return os.path.normpath(os.path.join(self.root, rel))


def _parse_split(value, name: str) -> list[int]:
    if isinstance(value, dict) and set(value) == {"range"}:
        lo, hi = value["range"]
        return list(range(int(lo), int(hi)))
    if isinstance(value, list):
        return [int(v) for v in value]
    raise ManifestError(f"split {name!r} must be an index list or {{'range': [lo, hi]}}")


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {
        "inputs": manifest.inputs,
        "pretrained": list(manifest.pretrained),
        "labels": manifest.labels,
        "splits": {k: list(map(int, v)) for k, v in manifest.splits.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    required = {"inputs", "pretrained", "labels", "splits"}
    missing = required - set(doc)
    if missing:
        raise ManifestError(f"{path}: missing keys {sorted(missing)}")
    splits = {
        name: _parse_split(doc["splits"].get(name, []), name)
        for name in ("train", "holdout", "test")
    }
    return DatasetManifest(
        inputs=doc["inputs"],
        pretrained=list(doc["pretrained"]),
        labels=doc["labels"],
        splits=splits,
        root=os.path.dirname(os.path.abspath(path)),
    )


@dataclass
class Dataset:
    """A manifest's files loaded into memory and cross-validated."""

    x: np.ndarray
    psi: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: dict[str, list[int]]
    source_dims: list[int] = field(default_factory=list)


def concat_sources(paths: list[str]) -> tuple[np.ndarray, list[int]]:
    """Load and column-concatenate feature files, in manifest order."""
    if not paths:
        raise ManifestError("no pretrained feature files listed")
    blocks = [read_features(p) for p in paths]
    rows = {p: b.shape[0] for p, b in zip(paths, blocks)}
    if len(set(rows.values())) > 1:
        detail = ", ".join(f"{p}: {r}" for p, r in rows.items())
        raise ManifestError(f"pretrained files disagree on row count ({detail})")
    return np.hstack(blocks), [b.shape[1] for b in blocks]


def load_dataset(manifest: DatasetManifest | str | os.PathLike) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    x = read_features(manifest.path(manifest.inputs))
    psi, source_dims = concat_sources([manifest.path(p) for p in manifest.pretrained])
    labels, n_classes = read_labels(manifest.path(manifest.labels))
    n = x.shape[0]
    rows = {manifest.inputs: n, "pretrained": psi.shape[0], manifest.labels: labels.shape[0]}
    if len({n, psi.shape[0], labels.shape[0]}) > 1:
        detail = ", ".join(f"{k}: {v}" for k, v in rows.items())
        raise ManifestError(f"referenced files disagree on row count ({detail})")
    seen: set[int] = set()
    for name, idx in manifest.splits.items():
        s = set(idx)
        if len(s) != len(idx):
            raise ManifestError(f"split {name!r} contains duplicate indices")
        if s & seen:
            raise ManifestError(f"split {name!r} overlaps another split")
        if s and (min(s) < 0 or max(s) >= n):
            raise ManifestError(f"split {name!r} has indices outside [0, {n})")
        seen |= s
    return Dataset(x, psi, labels, n_classes, dict(manifest.splits), source_dims)


def make_splits(n: int, seed: int, test_fraction: float = 0.25) -> dict[str, list[int]]:
    """Deterministic split protocol.

    Shuffle all indices, reserve `test_fraction` for test; of the remaining
    training indices, every 10th (positions 0, 10, 20, ...) becomes holdout.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    perm = rng.stream(seed, rng.STREAM_SPLITS).permutation(n)
    n_test = int(round(n * test_fraction))
    test = perm[:n_test]
    training = perm[n_test:]
    holdout = training[::10]
    mask = np.ones(training.shape[0], dtype=bool)
    mask[::10] = False
    train = training[mask]
    return {
        "train": [int(i) for i in train],
        "holdout": [int(i) for i in holdout],
        "test": [int(i) for i in test],
    }


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Planted-signal generator settings."""

    n_examples: int
    d_signal: int
    d_distractor: int
    d_noise: int
    n_classes: int
    label_temperature: float = 1.0
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if min(self.n_examples, self.d_distractor, self.d_noise) < 0:
            raise ConfigError("counts must be >= 0")
        if self.d_signal < 1:
            raise ConfigError("d_signal must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.label_temperature <= 0:
            raise ConfigError("label_temperature must be > 0")
        return self


@dataclass
class SyntheticData:
    psi: np.ndarray
    x: np.ndarray
    labels: np.ndarray
    n_classes: int
    d_signal: int
    d_distractor: int
    d_noise: int


def synth_planted(spec: SyntheticSpec) -> SyntheticData:
    """Generate a planted-signal dataset.

    Pretrained features are [signal | distractor | noise] columns.  Labels
    are sampled from softmax(signal @ C / temperature) for a fixed random
    class-direction matrix C, so noise and distractor columns carry no
    label information.  Inputs mix signal and distractor columns through a
    fixed invertible matrix (a product of unit-triangular factors, so the
    determinant is exactly 1) which lets the downstream model recover the
    signal in principle.
    """
    spec.validate()
    n = spec.n_examples
    signal = rng.stream(spec.seed, rng.STREAM_SIGNAL).normal_matrix(n, spec.d_signal)
    distractor = rng.stream(spec.seed, rng.STREAM_DISTRACTOR).normal_matrix(
        n, spec.d_distractor
    )
    noise = rng.stream(spec.seed, rng.STREAM_NOISE).normal_matrix(n, spec.d_noise)
    psi = np.hstack([signal, distractor, noise])

    directions = rng.stream(spec.seed, rng.STREAM_CLASS_DIRECTIONS).normal_matrix(
        spec.d_signal, spec.n_classes
    )
    logits = signal @ directions / spec.label_temperature
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.stream(spec.seed, rng.STREAM_LABELS).uniform(n)
    cdf = np.cumsum(probs, axis=1)
    labels = (u[:, None] >= cdf).sum(axis=1).astype(np.int64)
    labels = np.minimum(labels, spec.n_classes - 1)

    d_mix = spec.d_signal + spec.d_distractor
    mix_stream = rng.stream(spec.seed, rng.STREAM_MIXING)
    lower = np.eye(d_mix)
    lower[np.tril_indices(d_mix, -1)] = mix_stream.normal(d_mix * (d_mix - 1) // 2)
    upper = np.eye(d_mix)
    upper[np.triu_indices(d_mix, 1)] = mix_stream.normal(d_mix * (d_mix - 1) // 2)
    x = np.hstack([signal, distractor]) @ (lower @ upper)

    return SyntheticData(
        psi=psi,
        x=x,
        labels=labels,
        n_classes=spec.n_classes,
        d_signal=spec.d_signal,
        d_distractor=spec.d_distractor,
        d_noise=spec.d_noise,
    )


def append_noise_features(psi: np.ndarray, d_noise: int, seed: int) -> np.ndarray:
    """Append `d_noise` i.i.d. standard-normal columns to `psi`."""
    if d_noise < 0:
        raise ConfigError("d_noise must be >= 0")
    if d_noise == 0:
        return psi
    g = rng.stream(seed, rng.STREAM_NOISE_APPEND).normal_matrix(psi.shape[0], d_noise)
    return np.hstack([psi, g])


def write_synthetic_dataset(
    spec: SyntheticSpec, out_dir: str | os.PathLike, test_fraction: float = 0.25
) -> tuple[str, dict[str, str]]:
    """Write inputs/pretrained/labels plus a manifest; returns (manifest path, checksums)."""
    data = synth_planted(spec)
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "inputs.aftf": lambda p: write_features(data.x, p),
        "pretrained.aftf": lambda p: write_features(data.psi, p),
        "labels.aftl": lambda p: write_labels(data.labels, data.n_classes, p),
    }
    for name, writer in files.items():
        writer(os.path.join(out_dir, name))
    manifest = DatasetManifest(
        inputs="inputs.aftf",
        pretrained=["pretrained.aftf"],
        labels="labels.aftl",
        splits=make_splits(spec.n_examples, spec.seed, test_fraction),
        root=str(out_dir),
    )
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, manifest_path)
    checksums = {
        name: file_checksum(os.path.join(out_dir, name))
        for name in [*files, "manifest.json"]
    }
    return manifest_path, checksums
