"""Unified sequence-to-sequence Mandarin TTS front-end.

Converts raw character text directly into phoneme, tone and prosody label
sequences with a jointly trained encoder-decoder, an auxiliary
segmentation/POS feature extractor, and semi-auto-regressive decoding.
"""

__version__ = "0.1.0"
