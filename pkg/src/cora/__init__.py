"""Collaborative low-rank adaptation of a frozen toy language model.

A pre-trained collaborative-filtering encoder supplies user/item embeddings;
a trainable query generator turns each (user, item) pair into low-rank weight
deltas; the frozen decoder-only LM scores Yes/No recommendation prompts with
those deltas merged into its linear weights.
"""

__version__ = "0.1.0"
