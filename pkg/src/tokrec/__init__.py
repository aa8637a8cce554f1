"""ID-free recommenders - item tokens from quantized multimodal features."""

__version__ = "0.1.0"

MODALITIES: tuple[str, ...] = ("vision", "text")
