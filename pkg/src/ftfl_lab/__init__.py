"""Dyna-style model-based RL laboratory on a numpy substrate.

MBPO-style agents (SAC plus a probabilistic dynamics ensemble) with a switch
between residual and direct next-state targets and optional per-column
target normalization.  Desk-scale environments and a seed-sweep harness
are included.
"""

__version__ = "0.1.0"
