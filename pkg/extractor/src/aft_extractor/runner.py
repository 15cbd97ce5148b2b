"""Deterministic feature extraction over a text dataset.

Loads one or more pretrained transformer checkpoints, runs them in eval
mode with fixed thread count and no gradient tracking, pools token states
into one vector per example, and writes the shared feature/label/manifest
artifacts.  Rows are never shuffled: row i of every output corresponds to
dataset example i.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from . import formats
from .prompts import format_prompt

POOLINGS = ("cls-token", "last-token", "pooled")

# model families whose last-token embedding is the conventional sentence
# representation; cls-token is reserved for encoder families
DECODER_FAMILIES = {
    "gpt2",
    "gptj",
    "gpt_neo",
    "gpt_neox",
    "llama",
    "mistral",
    "opt",
    "bloom",
    "falcon",
    "phi",
    "qwen2",
    "gemma",
}


@dataclass
class ExtractionJob:
    models: list[str]
    dataset: str
    pooling: str = "cls-token"
    batch_size: int = 16
    out_dir: str = "."
    task: str | None = None
    max_length: int = 128
    split_seed: int = 0
    test_fraction: float = 0.25
    inputs_model: int = 0  # which model's features stand in for the raw inputs

    def validate(self) -> "ExtractionJob":
        if not self.models:
            raise ValueError("at least one model is required")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}; supported: {POOLINGS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.inputs_model < len(self.models):
            raise ValueError("inputs_model must index one of the listed models")
        return self


def load_examples(path: str, task: str | None) -> tuple[list[str], np.ndarray, int]:
    """Read a JSONL dataset in file order; returns (texts, labels, n_classes)."""
    texts: list[str] = []
    labels: list[int] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if "label" not in doc:
                raise ValueError(f"{path}:{line_no + 1}: example has no 'label'")
            labels.append(int(doc["label"]))
            if task is not None:
                texts.append(format_prompt(task, doc))
            elif "text" in doc:
                texts.append(str(doc["text"]))
            else:
                raise ValueError(
                    f"{path}:{line_no + 1}: example has no 'text' and no --task template given"
                )
    if not texts:
        raise ValueError(f"{path}: dataset is empty")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    return texts, y, int(y.max()) + 1


def _is_decoder_family(config) -> bool:
    return bool(getattr(config, "is_decoder", False)) or config.model_type in DECODER_FAMILIES


def check_pooling(config, pooling: str, model_name: str) -> None:
    decoder = _is_decoder_family(config)
    if pooling == "cls-token" and decoder:
        raise ValueError(
            f"{model_name}: cls-token pooling needs an encoder; "
            f"{config.model_type} is a decoder family (use last-token)"
        )
    if pooling == "last-token" and not decoder:
        raise ValueError(
            f"{model_name}: last-token pooling needs a decoder family; "
            f"{config.model_type} is an encoder (use cls-token or pooled)"
        )


def pool_hidden(hidden: torch.Tensor, mask: torch.Tensor, pooling: str) -> torch.Tensor:
    """Collapse (batch, tokens, dim) states to (batch, dim) per the rule."""
    if pooling == "cls-token":
        return hidden[:, 0, :]
    if pooling == "last-token":
        last = mask.sum(dim=1) - 1
        return hidden[torch.arange(hidden.shape[0]), last, :]
    m = mask.unsqueeze(-1).to(hidden.dtype)
    return (hidden * m).sum(dim=1) / m.sum(dim=1)


def extract_model_features(
    model_path: str, texts: list[str], pooling: str, batch_size: int, max_length: int
) -> np.ndarray:
    torch.manual_seed(0)
    torch.set_num_threads(1)
    tokenizer = AutoTokenizer.from_pretrained(model_path)
    model = AutoModel.from_pretrained(model_path)
    check_pooling(model.config, pooling, model_path)
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token or tokenizer.unk_token
    # last-token pooling indexes mask.sum() - 1, which requires right padding
    tokenizer.padding_side = "right"
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            batch = texts[start : start + batch_size]
            enc = tokenizer(
                batch,
                return_tensors="pt",
                padding=True,
                truncation=True,
                max_length=max_length,
            )
            out = model(input_ids=enc["input_ids"], attention_mask=enc["attention_mask"])
            pooled = pool_hidden(out.last_hidden_state, enc["attention_mask"], pooling)
            chunks.append(pooled.to(torch.float32).cpu().numpy())
    return np.concatenate(chunks, axis=0)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name.rstrip("/").split("/")[-1]) or "model"


def extract(job: ExtractionJob) -> dict[str, str]:
    """Run the job; returns {artifact filename: sha256} for every file written."""
    job.validate()
    texts, labels, n_classes = load_examples(job.dataset, job.task)
    os.makedirs(job.out_dir, exist_ok=True)

    feature_files: list[str] = []
    for i, model_path in enumerate(job.models):
        feats = extract_model_features(
            model_path, texts, job.pooling, job.batch_size, job.max_length
        )
        if feats.shape[0] != len(texts):
            raise RuntimeError(
                f"{model_path}: produced {feats.shape[0]} rows for {len(texts)} examples"
            )
        fname = f"features_{i}_{_slug(model_path)}.aftf"
        formats.write_features(feats, os.path.join(job.out_dir, fname))
        feature_files.append(fname)

    formats.write_labels(labels, n_classes, os.path.join(job.out_dir, "labels.aftl"))
    formats.write_manifest(
        inputs=feature_files[job.inputs_model],
        pretrained=feature_files,
        labels="labels.aftl",
        splits=formats.make_splits(len(texts), job.split_seed, job.test_fraction),
        path=os.path.join(job.out_dir, "manifest.json"),
    )
    artifacts = [*feature_files, "labels.aftl", "manifest.json"]
    return {name: formats.file_checksum(os.path.join(job.out_dir, name)) for name in artifacts}
