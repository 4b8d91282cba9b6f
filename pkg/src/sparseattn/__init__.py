"""Toy-scale sparse self-attention laboratory.

Dense numeric kernels, binary attention-mask construction, a small
transformer with hand-derived gradients and soft-mask support, Gumbel-sigmoid
mask learning, score-based attention pruning, and an exact-arithmetic
verifier for the no-diagonal contextual-mapping construction.
"""

__version__ = "0.1.0"
