"""Export mask embeddings and kernel fixtures from CLIP-style checkpoints."""
from .model import (
    EncoderConfig,
    VisionEncoder,
    convert_openai_visual,
    load_checkpoint,
    random_encoder,
    save_checkpoint,
)
from .pooling import ExtractionJob, GswSettings, extract_image_embeddings
from .runner import export_kernel_fixture, run_extraction

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "VisionEncoder",
    "ExtractionJob",
    "GswSettings",
    "convert_openai_visual",
    "extract_image_embeddings",
    "export_kernel_fixture",
    "load_checkpoint",
    "random_encoder",
    "run_extraction",
    "save_checkpoint",
]
