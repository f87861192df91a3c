"""bowlkit-extractor: ViT patch key features to BWLE embedding files."""

__version__ = "0.1.0"

from .extract import ExtractorConfig, extract  # noqa: F401
from .vit import ViTKeyExtractor, load_extractor, random_checkpoint  # noqa: F401
