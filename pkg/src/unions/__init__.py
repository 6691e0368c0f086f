"""Desk-scale laboratory for unlikelihood tuning on language-ID-mismatched
negative samples: synthetic multilingual corpora, a small trainable
encoder-decoder transformer, the combined likelihood/unlikelihood objective,
separation-based checkpoint selection, and an OTR/BLEU evaluation harness.
"""

__version__ = "0.1.0"
