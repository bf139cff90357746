"""Few-shot defect image generation with two-scale guidance and attention-derived masks."""

__version__ = "0.1.0"
