"""Speeder: desk-scale multimodal sequential recommendation with compressed
item prompts, position-aware sequence enhancement, staged modality training,
and a closed-form prompt-length cost model."""

__version__ = "0.1.0"
