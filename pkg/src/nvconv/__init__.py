"""Nonverbal conversation pipeline: AU+POSE seq2seq models and a temporal face synthesizer."""

__version__ = "0.1.0"
