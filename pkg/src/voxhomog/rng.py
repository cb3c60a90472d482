"""Deterministic seed derivation.

Parallel parts of the pipeline (one RVE per task) must produce identical
output no matter how tasks are scheduled.  Each task therefore gets its own
child seed computed purely from the root seed and the task's indices, via a
splitmix64 mix.  The child seeds feed numpy PCG64 generators.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 step: returns the mixed output for ``state + golden``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(root: int, *indices: int) -> int:
    """Mix ``root`` with any number of integer indices into a 64-bit seed.

    Deterministic, order-sensitive in the indices, and independent of any
    global RNG state.  Negative indices are folded into the 64-bit ring.
    """
    state = root & _MASK64
    for ix in indices:
        # hash the index before folding so (root, i) and (i, root) differ
        state = splitmix64(state ^ splitmix64(ix & _MASK64))
    return splitmix64(state)
