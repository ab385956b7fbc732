"""seqdistill: sequential-recommendation distillation workbench.

A self-contained numpy/numba stack for training a causal self-attention
next-item recommender, distilling its user representations into a frozen
text encoder through lightweight projection heads, and probing how much
sequence order each model actually uses.
"""

__version__ = "0.1.0"
