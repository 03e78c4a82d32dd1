"""memefuse: hateful-meme detection from caption, OCR text, and region features.

Everything runs on a small from-scratch float64 tensor engine with
reverse-mode differentiation, so every formula in the pipeline is
gradient-checkable against finite differences.
"""

__version__ = "0.1.0"
