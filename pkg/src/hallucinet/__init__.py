"""Multi-modal semantic segmentation with modality hallucination."""

__version__ = "0.1.0"
