"""specgen: RF spectrogram synthesis, diffusion-based generation, and evaluation."""

__version__ = "0.1.0"
