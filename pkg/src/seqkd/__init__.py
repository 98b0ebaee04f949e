"""Sequence-level knowledge distillation for attention seq2seq recognizers."""

__version__ = "0.1.0"
