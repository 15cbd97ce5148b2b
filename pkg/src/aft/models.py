"""Small downstream models: a feature extractor plus a linear head.

The extractor is either a single affine map ("linear") or an MLP with the
activation applied after every layer, so downstream features stay bounded
for the tanh default.  `forward` records onto a tape for training;
`extractor_apply` / `head_apply` are the plain inference paths.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import featurestore, rng
from .autodiff import Node, Tape, as_matrix
from .errors import ConfigError, DimensionError

ACTIVATIONS = ("tanh", "relu")


@dataclass
class ExtractorSpec:
    """Architecture of the downstream feature extractor."""

    kind: str = "mlp"  # linear | mlp
    hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"
    d_phi: int = 32

    def validate(self) -> "ExtractorSpec":
        if self.kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.d_phi < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be >= 1")
        return self

    def widths(self, d_in: int) -> list[int]:
        if self.kind == "linear":
            return [d_in, self.d_phi]
        return [d_in, *self.hidden, self.d_phi]


def init_extractor_params(spec: ExtractorSpec, d_in: int, seed: int) -> dict[str, np.ndarray]:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    spec.validate()
    widths = spec.widths(d_in)
    stream = rng.stream(seed, rng.STREAM_PARAM_INIT)
    params: dict[str, np.ndarray] = {}
    for layer, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        s = stream.child(layer)
        params[f"extractor.w{layer}"] = s.normal_matrix(fan_out, fan_in) / math.sqrt(fan_in)
        params[f"extractor.b{layer}"] = np.zeros((1, fan_out))
    return params


def init_head_params(d_out: int, d_phi: int, seed: int) -> dict[str, np.ndarray]:
    s = rng.stream(seed, rng.STREAM_PARAM_INIT).child(1000)
    return {
        "head.w": s.normal_matrix(d_out, d_phi) / math.sqrt(d_phi),
        "head.b": np.zeros((1, d_out)),
    }


def _n_layers(params: dict[str, np.ndarray]) -> int:
    return sum(1 for name in params if name.startswith("extractor.w"))


def extractor_forward(
    tape: Tape, spec: ExtractorSpec, nodes: dict[str, Node], x: Node
) -> Node:
    act = tape.tanh if spec.activation == "tanh" else tape.relu
    out = x
    layers = sum(1 for name in nodes if name.startswith("extractor.w"))
    for layer in range(layers):
        out = tape.affine(out, nodes[f"extractor.w{layer}"], nodes[f"extractor.b{layer}"])
        if spec.kind == "mlp":
            out = act(out)
    return out


def forward(
    tape: Tape,
    spec: ExtractorSpec,
    nodes: dict[str, Node],
    x_batch: Node,
) -> tuple[Node, Node]:
    """Features and logits for a batch, both recorded for backward."""
    phi = extractor_forward(tape, spec, nodes, x_batch)
    logits = tape.affine(phi, nodes["head.w"], nodes["head.b"])
    return phi, logits


def extractor_apply(spec: ExtractorSpec, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Inference-only extractor pass (no tape)."""
    x = as_matrix(x)
    act = np.tanh if spec.activation == "tanh" else lambda v: np.maximum(v, 0.0)
    out = x
    for layer in range(_n_layers(params)):
        w, b = params[f"extractor.w{layer}"], params[f"extractor.b{layer}"]
        if out.shape[1] != w.shape[1]:
            raise DimensionError(f"layer {layer}: input {out.shape} vs weight {w.shape}")
        out = out @ w.T + b
        if spec.kind == "mlp":
            out = act(out)
    return out


def head_apply(params: dict[str, np.ndarray], phi: np.ndarray) -> np.ndarray:
    return phi @ params["head.w"].T + params["head.b"]


def predict(spec: ExtractorSpec, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    return head_apply(params, extractor_apply(spec, params, x)).argmax(axis=1)


def accuracy(spec: ExtractorSpec, params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        return float("nan")
    return float((predict(spec, params, x) == np.asarray(y).reshape(-1)).mean())


def tensor_product_features(phi_a: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
    """Flattened outer product of two feature vectors.

    Entry i * len(phi_b) + j equals phi_a[i] * phi_b[j]; used to compose
    two-tower (e.g. image/text) features into one joint vector.
    """
    a = np.asarray(phi_a, dtype=np.float64).reshape(-1)
    b = np.asarray(phi_b, dtype=np.float64).reshape(-1)
    return np.outer(a, b).reshape(-1)


def tensor_product_batch(phi_a: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
    """Row-wise tensor products for matched batches."""
    a, b = as_matrix(phi_a), as_matrix(phi_b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape} vs {b.shape}")
    return np.einsum("bi,bj->bij", a, b).reshape(a.shape[0], -1)


# ---------------------------------------------------------------------------
# checkpoints: one feature file per tensor plus a JSON index


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    os.makedirs(path, exist_ok=True)
    index = []
    for name in sorted(tensors):
        value = as_matrix(tensors[name], name)
        fname = name.replace("/", "_") + ".aftf"
        featurestore.write_features(value, os.path.join(path, fname))
        index.append(
            {"name": name, "rows": value.shape[0], "cols": value.shape[1], "file": fname}
        )
    import json

    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump({"tensors": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    import json

    with open(os.path.join(path, "index.json")) as fh:
        index = json.load(fh)["tensors"]
    out: dict[str, np.ndarray] = {}
    for entry in index:
        value = featurestore.read_features(os.path.join(path, entry["file"]))
        if value.shape != (entry["rows"], entry["cols"]):
            raise ConfigError(
                f"checkpoint tensor {entry['name']!r} has shape {value.shape}, "
                f"index says {(entry['rows'], entry['cols'])}"
            )
        out[entry["name"]] = value
    return out
