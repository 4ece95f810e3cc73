"""Desk-scale long-context hybrid retrieval stack.

Library layers, bottom up: a numpy-backed autograd tape (`tensor`,
`gradcheck`, `optim`, `checkpoint`), an unpadded RoPE transformer encoder
(`encoder`, `unpad`), data plumbing (`tokenizer`, `pipeline`), training
objectives (`losses`), representation extraction (`representation`), hybrid
retrieval (`index`), IR metrics (`evalkit`), and the operator CLI (`cli`).
"""

from .tensor import ComputeGraph, NumericsError, Tensor, forward_backward

__version__ = "0.1.0"

__all__ = ["ComputeGraph", "NumericsError", "Tensor", "forward_backward", "__version__"]
