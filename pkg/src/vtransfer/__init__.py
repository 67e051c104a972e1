"""Zero-shot cross-lingual voice transfer at toy scale, in pure numpy."""

__version__ = "0.1.0"
