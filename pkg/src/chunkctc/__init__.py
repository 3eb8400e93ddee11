"""Streaming CTC speech recognition with punctuation, trained on concatenated utterances."""

__version__ = "0.1.0"
