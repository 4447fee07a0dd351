"""Desk-scale fashion vision-language representation learning.

Synthetic multi-view catalog generation, a discrete image tokenizer,
a shared text/fusion Transformer with six pre-training objectives, and
five downstream retrieval/classification benchmarks, all runnable on a
single CPU.
"""

__version__ = "0.1.0"
