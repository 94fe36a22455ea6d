"""EEND-EDA: end-to-end neural diarization with encoder-decoder based attractors."""

__version__ = "0.1.0"
