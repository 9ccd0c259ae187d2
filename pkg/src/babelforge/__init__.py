"""Desk-scale multilingual masked-LM pretraining lab.

Pipeline stages: corpus cleaning (langid + perplexity filtering), unigram
subword tokenization, exponentially smoothed language sampling, MLM training
of a small numpy transformer, and transfer-probe sweeps on synthetic cipher
languages.
"""

__version__ = "0.1.0"
