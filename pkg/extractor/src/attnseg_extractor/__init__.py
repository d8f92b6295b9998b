"""attnseg-extractor: capture diffusion attention tensors into attnseg bundles."""

from .capture import CapturedAttention, DiffusionBackend
from .extract import default_class_ids, extract, load_image
from .spans import SpanMappingError, map_spans
from .tiny_backend import TinyBackend, WordTokenizer

__version__ = "0.1.0"

__all__ = [
    "CapturedAttention",
    "DiffusionBackend",
    "SpanMappingError",
    "TinyBackend",
    "WordTokenizer",
    "default_class_ids",
    "extract",
    "load_image",
    "map_spans",
]
