"""Bilingual masked-LM embeddings for desk-scale neural machine translation."""

__version__ = "0.1.0"
