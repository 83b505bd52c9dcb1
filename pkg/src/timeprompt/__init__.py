"""timeprompt: prompt-guided time-series forecasting at desk scale.

A self-contained lab built on a small reverse-mode autodiff tensor core:
a trainable soft-prompt pool with similarity retrieval, statistics-based
hard prompts, vocabulary reprogramming, gated cross-modal fusion, a tiny
frozen transformer with LoRA adapters, and a deterministic
train/evaluate/ablate harness.
"""

from . import kernels

__version__ = "0.1.0"
__all__ = ["kernels", "__version__"]
