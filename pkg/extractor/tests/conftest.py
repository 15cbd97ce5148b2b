import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("HF_HUB_OFFLINE", "1")

import json
import string

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizerFast

PRIMARY_SRC = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "..", "src"))


@pytest.fixture(scope="session")
def tiny_encoder(tmp_path_factory):
    """A tiny randomly initialized BERT-architecture checkpoint on disk.

    Stands in for a small public encoder; weights are seed-fixed so runs
    are reproducible, and the character-level vocab tokenizes any text.
    """
    model_dir = tmp_path_factory.mktemp("tiny_encoder")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    chars = list(string.ascii_lowercase + string.digits + ".,!?'\"-:;()")
    vocab += chars + [f"##{c}" for c in chars]
    vocab_file = model_dir / "vocab.txt"
    vocab_file.write_text("\n".join(vocab) + "\n")
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file), do_lower_case=True)

    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=128,
    )
    model = BertModel(config)
    model.save_pretrained(model_dir)
    tokenizer.save_pretrained(model_dir)
    return str(model_dir)


@pytest.fixture(scope="session")
def text_dataset(tmp_path_factory):
    """A 32-example binary sentiment set, fixed order, JSONL."""
    path = tmp_path_factory.mktemp("data") / "reviews.jsonl"
    positives = [
        "a joyful and warm film",
        "clever writing and great pacing",
        "the cast shines in every scene",
        "an instant classic, truly moving",
        "beautiful score and photography",
        "funny, sharp, and heartfelt",
        "a delightful surprise from start to end",
        "masterful direction and acting",
        "charming, witty, and wise",
        "the best picture of the year",
        "original and endlessly inventive",
        "gorgeous visuals with real soul",
        "a triumph of storytelling",
        "smart, bold, and satisfying",
        "pure cinematic pleasure",
        "an uplifting and tender story",
    ]
    negatives = [
        "a dull and lifeless film",
        "clumsy writing and poor pacing",
        "the cast sleepwalks through every scene",
        "an instant bore, truly tedious",
        "grating score and murky photography",
        "unfunny, blunt, and hollow",
        "a dreary slog from start to end",
        "aimless direction and wooden acting",
        "charmless, witless, and shallow",
        "the worst picture of the year",
        "derivative and endlessly repetitive",
        "ugly visuals with no soul",
        "a failure of storytelling",
        "dumb, timid, and unsatisfying",
        "pure cinematic punishment",
        "a depressing and cold story",
    ]
    with open(path, "w") as fh:
        for pos, neg in zip(positives, negatives):
            fh.write(json.dumps({"text": pos, "label": 1}) + "\n")
            fh.write(json.dumps({"text": neg, "label": 0}) + "\n")
    return str(path)
