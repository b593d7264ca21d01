"""Perfect SubMap generation and verification.

The generator fills the grid cell by cell in row-major order, starting from a
random top-left patch. Every cell that completes a window yields a codeword;
the codeword is accepted only if no codeword already placed lies within
Hamming distance ``H < h_min``. Placed codewords are tracked in a flag array
of size ``k**(m*n)`` indexed by the codeword read as base-``k`` digits.

A dead end (no symbol yields an acceptable codeword) is resolved by
reshuffling the most recently placed cells: the search backs up, tries their
remaining symbols in random order and refills forward. After
``max_shuffles`` such events the grid is discarded and generation restarts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Above this many Hamming-ball entries a direct scan of the placed codewords
# is cheaper than probing the flag array.
_BALL_PROBE_LIMIT = 4096


class GenerationError(RuntimeError):
    """The generator exhausted its retry budget."""

    def __init__(self, message: str, restarts: int, shuffles: int):
        super().__init__(message)
        self.restarts = restarts
        self.shuffles = shuffles


@dataclass(frozen=True)
class SymbolGrid:
    """Coded symbol array with the parameters it was generated under."""

    symbols: np.ndarray
    k: int
    window: tuple[int, int] = (3, 3)
    h_min: int = 1
    seed: int | None = None

    def __post_init__(self):
        arr = np.array(self.symbols, dtype=np.int64, copy=True)
        if arr.ndim != 2:
            raise ValueError("symbols must be a 2D array")
        if arr.size and (arr.min() < 0 or arr.max() >= self.k):
            raise ValueError(f"symbols must lie in [0, {self.k})")
        arr.setflags(write=False)
        object.__setattr__(self, "symbols", arr)
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))

    @property
    def rows(self) -> int:
        return self.symbols.shape[0]

    @property
    def cols(self) -> int:
        return self.symbols.shape[1]

    def codewords(self, window: tuple[int, int] | None = None) -> np.ndarray:
        """Window codewords, shape ``(rows-m+1, cols-n+1, m*n)``, row-major inside a window."""
        return window_codewords(self.symbols, window or self.window)

    def codeword_table(self) -> dict[tuple[int, ...], tuple[int, int]]:
        """Map codeword -> grid position of the window's centre cell.

        Valid for grids with unique windows; a repeated codeword keeps its
        first position.
        """
        m, n = self.window
        cw = self.codewords()
        table: dict[tuple[int, ...], tuple[int, int]] = {}
        for r in range(cw.shape[0]):
            for c in range(cw.shape[1]):
                table.setdefault(tuple(cw[r, c].tolist()), (r + m // 2, c + n // 2))
        return table


def window_codewords(symbols: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    m, n = window
    symbols = np.asarray(symbols)
    if m > symbols.shape[0] or n > symbols.shape[1]:
        raise ValueError(f"window {m}x{n} does not fit grid {symbols.shape}")
    view = sliding_window_view(symbols, (m, n))
    return view.reshape(view.shape[0], view.shape[1], m * n)


def codeword_index(code, k: int) -> int:
    """Flag-array index of ``code``: its symbols as base-``k`` digits, most significant first."""
    idx = 0
    for s in code:
        idx = idx * k + int(s)
    return idx


def hamming_ball_size(length: int, k: int, radius: int) -> int:
    return sum(math.comb(length, d) * (k - 1) ** d for d in range(radius + 1))


class _CodewordSet:
    """Placed codewords: flag array plus the Hamming test against them."""

    def __init__(self, k: int, length: int, h_min: int):
        self.k = k
        self.length = length
        self.radius = h_min - 1
        self.flags = np.zeros(k**length, dtype=bool)
        self.weights = [k ** (length - 1 - j) for j in range(length)]
        self.use_ball = hamming_ball_size(length, k, self.radius) <= _BALL_PROBE_LIMIT
        self._placed: dict[int, tuple[int, ...]] = {}
        # Per-position digit changes, precomputed for the ball probes.
        self._combos = [
            list(itertools.combinations(range(length), d)) for d in range(1, self.radius + 1)
        ]

    def index(self, code) -> int:
        return sum(int(s) * w for s, w in zip(code, self.weights))

    def passes(self, code) -> bool:
        """True when no placed codeword lies at distance < h_min from ``code``."""
        base = self.index(code)
        flags = self.flags
        if flags[base]:
            return False
        if self.radius == 0 or not self._placed:
            return True
        if self.use_ball:
            k, w = self.k, self.weights
            for combos in self._combos:
                for positions in combos:
                    alternatives = [
                        [(v - code[j]) * w[j] for v in range(k) if v != code[j]] for j in positions
                    ]
                    for deltas in itertools.product(*alternatives):
                        if flags[base + sum(deltas)]:
                            return False
            return True
        placed = np.array(list(self._placed.values()), dtype=np.int64)
        dist = (placed != np.asarray(code)).sum(axis=1)
        return bool(dist.min() > self.radius)

    def add(self, code) -> None:
        idx = self.index(code)
        self.flags[idx] = True
        self._placed[idx] = tuple(int(s) for s in code)

    def remove(self, code) -> None:
        idx = self.index(code)
        self.flags[idx] = False
        self._placed.pop(idx, None)

    def clear(self) -> None:
        self.flags[:] = False
        self._placed.clear()


def generate_psm(
    rows: int,
    cols: int,
    k: int,
    window: tuple[int, int] = (3, 3),
    h_min: int = 2,
    seed: int = 0,
    max_shuffles: int = 1000,
    max_restarts: int = 100,
) -> SymbolGrid:
    """Generate an ``rows x cols`` Perfect SubMap over ``k`` symbols.

    Every ``window`` sub-array is unique and any two window codewords differ
    in at least ``h_min`` positions. Deterministic for a given ``seed``.

    Raises:
        ValueError: if the codeword space cannot hold the required windows.
        GenerationError: if ``max_restarts`` restarts all got stuck.
    """
    m, n = window
    if rows < m or cols < n:
        raise ValueError(f"grid {rows}x{cols} smaller than window {m}x{n}")
    if k < 1 or h_min < 1:
        raise ValueError("need k >= 1 and h_min >= 1")
    length = m * n
    n_windows = (rows - m + 1) * (cols - n + 1)
    if n_windows > k**length:
        raise ValueError(f"{n_windows} windows cannot be unique over {k**length} codewords")

    rng = np.random.default_rng(seed)
    placed = _CodewordSet(k, length, h_min)
    grid = np.full((rows, cols), -1, dtype=np.int64)
    n_cells = rows * cols
    total_shuffles = 0

    def window_at(i: int, j: int):
        """Codeword completed by cell (i, j), or None if the cell completes no window."""
        if i < m - 1 or j < n - 1:
            return None
        return grid[i - m + 1 : i + 1, j - n + 1 : j + 1].reshape(-1).tolist()

    for restart in range(max_restarts + 1):
        grid[:] = -1
        placed.clear()
        choices: list[list[int] | None] = [None] * n_cells
        shuffles = 0
        pos = 0
        while 0 <= pos < n_cells:
            i, j = divmod(pos, cols)
            if choices[pos] is None:
                choices[pos] = rng.permutation(k).tolist()
            options = choices[pos]
            accepted = False
            while options:
                grid[i, j] = options.pop()
                code = window_at(i, j)
                if code is None:
                    accepted = True
                    break
                if placed.passes(code):
                    placed.add(code)
                    accepted = True
                    break
            if accepted:
                pos += 1
                continue
            # Dead end: release this cell and reshuffle the previous one.
            grid[i, j] = -1
            choices[pos] = None
            shuffles += 1
            if shuffles > max_shuffles:
                break
            pos -= 1
            if pos >= 0:
                pi, pj = divmod(pos, cols)
                prev = window_at(pi, pj)
                if prev is not None:
                    placed.remove(prev)
        total_shuffles += shuffles
        if pos == n_cells:
            return SymbolGrid(grid.copy(), k, (m, n), h_min, seed)
    raise GenerationError(
        f"PSM generation failed for {rows}x{cols}, k={k}, window={m}x{n}, h_min={h_min} "
        f"after {max_restarts + 1} attempts ({total_shuffles} shuffles)",
        restarts=max_restarts + 1,
        shuffles=total_shuffles,
    )


@dataclass
class PSMReport:
    unique: bool
    min_hamming: int | None
    h_min: int
    violations: list[tuple[tuple[int, int], tuple[int, int], int]] = field(default_factory=list)
    n_violations: int = 0

    @property
    def ok(self) -> bool:
        return self.unique and (self.min_hamming is None or self.min_hamming >= self.h_min)


def verify_psm(
    grid: SymbolGrid | np.ndarray,
    window: tuple[int, int] | None = None,
    h_min: int | None = None,
    max_violations: int = 1000,
) -> PSMReport:
    """Exhaustive pairwise check of all window codewords.

    ``violations`` lists window pairs (top-left positions) closer than
    ``h_min``, up to ``max_violations`` entries; ``n_violations`` counts all.
    """
    if isinstance(grid, SymbolGrid):
        symbols = grid.symbols
        window = window or grid.window
        h_min = grid.h_min if h_min is None else h_min
    else:
        symbols = np.asarray(grid)
        if window is None:
            raise ValueError("window is required for a raw array")
        h_min = 1 if h_min is None else h_min
    cw = window_codewords(symbols, window)
    n_r, n_c, length = cw.shape
    flat = cw.reshape(-1, length)
    count = len(flat)
    min_d: int | None = None
    violations: list[tuple[tuple[int, int], tuple[int, int], int]] = []
    n_viol = 0
    unique = True
    block = 256
    for start in range(0, count, block):
        stop = min(start + block, count)
        dist = (flat[start:stop, None, :] != flat[None, :, :]).sum(axis=2)
        rows_idx = np.arange(start, stop)[:, None]
        upper = np.arange(count)[None, :] > rows_idx
        if not upper.any():
            continue
        d_upper = np.where(upper, dist, length + 1)
        local_min = int(d_upper.min())
        if local_min <= length:
            min_d = local_min if min_d is None else min(min_d, local_min)
        if local_min == 0:
            unique = False
        bad_a, bad_b = np.nonzero(d_upper < h_min)
        n_viol += len(bad_a)
        for a, b in zip(bad_a.tolist(), bad_b.tolist()):
            if len(violations) >= max_violations:
                break
            ia = start + a
            violations.append((divmod(ia, n_c), divmod(b, n_c), int(dist[a, b])))
    return PSMReport(unique, min_d, h_min, violations, n_viol)
