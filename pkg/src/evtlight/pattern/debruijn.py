"""De Bruijn sequences (Lyndon word concatenation, Fredricksen-Kessler-Maiorana)."""

from __future__ import annotations

import numpy as np

MAX_SEQUENCE_LENGTH = 1 << 24


class PatternSizeError(ValueError):
    """Requested pattern exceeds the configured size cap."""


def generate_debruijn(k: int, n: int, max_length: int = MAX_SEQUENCE_LENGTH) -> list[int]:
    """Cyclic sequence of length ``k**n`` holding every length-``n`` word once.

    Concatenates, in lexicographic order, the Lyndon words over ``range(k)``
    whose length divides ``n``.
    """
    if k < 2 or n < 1:
        raise ValueError(f"need k >= 2 and n >= 1, got k={k}, n={n}")
    if k**n > max_length:
        raise PatternSizeError(f"k**n = {k**n} exceeds cap {max_length}")

    seq: list[int] = []
    a = [0] * (n + 1)

    # Iterative form of the recursive db(t, p) generator, so large n does not
    # hit the interpreter recursion limit.
    stack = [(1, 1, -1)]
    while stack:
        t, p, j = stack.pop()
        if t > n:
            if n % p == 0:
                seq.extend(a[1 : p + 1])
            continue
        if j == -1:
            a[t] = a[t - p]
            stack.append((t, p, a[t - p] + 1))
            stack.append((t + 1, p, -1))
        elif j < k:
            a[t] = j
            stack.append((t, p, j + 1))
            stack.append((t + 1, t, -1))
    return seq


def cyclic_windows(seq, n: int) -> list[tuple[int, ...]]:
    """All length-``n`` windows of ``seq`` read cyclically."""
    seq = list(seq)
    ext = seq + seq[: n - 1]
    return [tuple(ext[i : i + n]) for i in range(len(seq))]


def debruijn_rows(k: int, n: int, rows: int, cols: int) -> np.ndarray:
    """Grid whose every row is the same De Bruijn sequence, repeated cyclically."""
    seq = np.array(generate_debruijn(k, n), dtype=np.int64)
    line = np.resize(seq, cols)
    return np.tile(line, (rows, 1))
