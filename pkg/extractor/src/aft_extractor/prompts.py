"""Prompt templates for the eight supported text classification tasks.

Each template is fixed character-for-character; extraction quality for
decoder models depends on the exact string, so these are not configurable.
"""

from __future__ import annotations

TEMPLATES = {
    "imdb": "{review} Overall, the sentiment of my review is",
    "boolq": "Question: {question}\n Reference: {passage}\n Answer:",
    "mnli": "Premise: {premise}\n Hypothesis: {hypothesis}\n Does the premise entail the hypothesis? Answer:",
    "sst2": 'Review: "{sentence}"\n Sentiment:',
    "mrpc": "Sentence 1: {sentence1}\n Sentence 2: {sentence2}\n Is Sentence 1 equivalent to Sentence 2? Answer:",
    "qqp": "Question 1: {question1}\n Question 2: {question2}\n Are Question 1 and Question 2 equivalent? Answer:",
    "qnli": "Question: {question}\n Sentence: {sentence}\n Does the sentence answer the question? Answer:",
    "rte": "Sentence 1: {sentence1}\n Sentence 2: {sentence2}\n Does Sentence 1 entail Sentence 2? Answer:",
}

FIELDS = {
    "imdb": ("review",),
    "boolq": ("question", "passage"),
    "mnli": ("premise", "hypothesis"),
    "sst2": ("sentence",),
    "mrpc": ("sentence1", "sentence2"),
    "qqp": ("question1", "question2"),
    "qnli": ("question", "sentence"),
    "rte": ("sentence1", "sentence2"),
}


def format_prompt(task: str, example: dict) -> str:
    """Render one example through its task template."""
    if task not in TEMPLATES:
        raise ValueError(f"unknown task {task!r}; supported: {', '.join(sorted(TEMPLATES))}")
    missing = [f for f in FIELDS[task] if f not in example]
    if missing:
        raise ValueError(f"task {task!r} example is missing fields {missing}")
    return TEMPLATES[task].format(**{f: example[f] for f in FIELDS[task]})
