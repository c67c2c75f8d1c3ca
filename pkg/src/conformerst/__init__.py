"""Desk-scale Conformer encoder-decoder toolkit for speech recognition and
speech translation: dual CTC auxiliary losses, two-stage multi-task training,
and joint CTC-rescored beam search."""

__version__ = "0.1.0"
