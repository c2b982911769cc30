"""Runtime modality adaptation for decoder-only transformers at desk scale."""

__version__ = "0.1.0"
