"""Offline feature extraction producing the shared AFTF/AFTL artifacts."""

from .prompts import TEMPLATES, format_prompt
from .runner import ExtractionJob, extract, pool_hidden

__version__ = "0.1.0"
