"""Audio-visual Multimodal Transformer with masked-frame pretraining, in numpy."""

__version__ = "0.1.0"
