"""Dot detection, codeword extraction and PSM lookup.

Dots are connected components of the duty-cycle image. Each dot's symbol is
the nearest alphabet duty cycle. A dot's 3x3 codeword is read from its
horizontal neighbours in its own camera row and from a dot in the rows
above and below with their own horizontal neighbours.

On a rectified rig a pattern row stays a camera row, but a depth step
shifts whole row segments sideways. The vertical neighbour is therefore
searched within ``max_shift`` pitches of x. Every choice yields one
candidate codeword, and :func:`match` keeps the cheapest candidate that
decodes.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from evtlight._io import atomic_write_text
from evtlight.estimator import DutyCycleImage
from evtlight.pattern.psm import SymbolGrid, window_codewords
from evtlight.pattern.signals import ConfigurationError, PatternSpec, SignalSpec

DEFAULT_TOLERANCE = 0.07
_TIE_EPS = 1e-9


@dataclass
class DetectedDot:
    centroid: tuple[float, float]  # (x, y) camera pixels
    alpha: float
    support: int
    symbol: int | None = None


@dataclass
class Correspondence:
    camera_point: tuple[float, float]
    projector_point: tuple[float, float]
    codeword: tuple[int, ...]
    hamming: int
    grid_pos: tuple[int, int]
    dot_index: int = -1
    cells: tuple[int, ...] = ()  # dot indices of the window, row-major


def detect_dots(
    image: DutyCycleImage,
    min_support: int = 1,
    connectivity: int = 8,
    alphabet: Mapping[int, SignalSpec | float] | None = None,
    tolerance: float = DEFAULT_TOLERANCE,
) -> list[DetectedDot]:
    """Connected components of present pixels, in label (raster) order.

    The centroid is the mean pixel position of the component and ``alpha``
    its median duty cycle. With an ``alphabet`` each dot is also classified.
    """
    present = image.present
    if not present.any():
        return []
    structure = np.ones((3, 3), dtype=bool) if connectivity == 8 else None
    labels, n = ndimage.label(present, structure=structure)
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    starts = np.searchsorted(lab, np.arange(1, n + 1))
    ends = np.append(starts[1:], len(lab))
    dots = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        support = e - s
        if support < min_support:
            continue
        cx = float(xs[s:e].mean())
        cy = float(ys[s:e].mean())
        alpha = float(np.median(image.alpha[ys[s:e], xs[s:e]]))
        sym = classify_symbol(alpha, alphabet, tolerance) if alphabet is not None else None
        dots.append(DetectedDot((cx, cy), alpha, support, sym))
    return dots


def _dutycycles(alphabet: Mapping[int, SignalSpec | float]) -> dict[int, float]:
    return {s: (a.dutycycle if isinstance(a, SignalSpec) else float(a)) for s, a in alphabet.items()}


def classify_symbol(
    alpha: float | None,
    alphabet: Mapping[int, SignalSpec | float],
    tolerance: float = DEFAULT_TOLERANCE,
) -> int | None:
    """Nearest alphabet symbol within ``tolerance``; None when too far or tied.

    Raises:
        ConfigurationError: two duty cycles are not separated by more than
            twice the tolerance.
    """
    duty = _dutycycles(alphabet)
    vals = sorted(duty.values())
    if any(b - a <= 2 * tolerance for a, b in zip(vals, vals[1:])):
        raise ConfigurationError(f"alphabet duty cycles {vals} closer than 2 x {tolerance}")
    if alpha is None or math.isnan(alpha):
        return None
    ranked = sorted((abs(alpha - a), s) for s, a in duty.items())
    best_d, best_s = ranked[0]
    if len(ranked) > 1 and ranked[1][0] - best_d <= _TIE_EPS:
        return None
    return best_s if best_d <= tolerance else None


def estimate_pitch(dots: Sequence[DetectedDot]) -> float:
    """Median nearest-neighbour distance between dot centroids."""
    if len(dots) < 2:
        return float("nan")
    pts = np.array([d.centroid for d in dots])
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(np.median(d2.min(axis=1))))


@dataclass
class CodewordCandidate:
    dot_index: int
    cells: tuple[int, ...]
    codeword: tuple[int, ...]
    cost: float


class _Neighbors:
    """Sector-based neighbour queries over dot centroids."""

    def __init__(self, dots: Sequence[DetectedDot], pitch: float, reach: float, max_shift: float):
        self.pts = np.array([d.centroid for d in dots], dtype=float).reshape(-1, 2)
        self.pitch = pitch
        self.reach = reach * pitch
        self.max_shift = max_shift * pitch
        self._cache: dict[tuple[int, int], int | None] = {}

    def horizontal(self, i: int, side: int) -> int | None:
        """Nearest dot within the left (-1) or right (+1) 45-degree sector."""
        key = (i, side)
        if key in self._cache:
            return self._cache[key]
        d = self.pts - self.pts[i]
        dx, dy = d[:, 0] * side, d[:, 1]
        ok = (dx > 0) & (np.abs(dy) <= dx * math.tan(math.pi / 8))
        dist = np.hypot(dx, dy)
        ok &= dist <= self.reach
        best = int(np.argmin(np.where(ok, dist, np.inf))) if ok.any() else None
        self._cache[key] = best
        return best

    def vertical(self, i: int, side: int) -> list[tuple[int, float]]:
        """Dots one row above (-1) or below (+1) within the horizontal shift limit.

        Sorted by ``|dx|``; the row is the band ``dy`` in ``[0.5, 1.5]`` pitches.
        """
        d = self.pts - self.pts[i]
        dx, dy = d[:, 0], d[:, 1] * side
        ok = (dy >= 0.5 * self.pitch) & (dy <= 1.5 * self.pitch) & (np.abs(dx) <= self.max_shift)
        idx = np.flatnonzero(ok)
        cost = np.abs(dx[idx]) + np.abs(dy[idx] - self.pitch)
        order = np.argsort(cost, kind="stable")
        return [(int(idx[k]), float(cost[k])) for k in order]


def extract_codewords(
    dots: Sequence[DetectedDot],
    pitch: float,
    reach: float = 1.5,
    max_shift: float = 0.5,
    max_candidates: int = 9,
) -> list[list[CodewordCandidate]]:
    """Candidate 3x3 codewords per dot, cheapest first; empty list = no codeword.

    ``reach`` bounds the horizontal neighbour distance and ``max_shift`` the
    sideways offset of vertical neighbours, both in pitches. A dot without a
    full neighbourhood of classified dots gets no candidate.
    """
    nb = _Neighbors(dots, pitch, reach, max_shift)
    symbols = [d.symbol for d in dots]
    out: list[list[CodewordCandidate]] = []
    for i in range(len(dots)):
        cands: list[CodewordCandidate] = []
        row_mid = _row_triplet(nb, i)
        if row_mid is not None:
            ups = [(u, c, _row_triplet(nb, u)) for u, c in nb.vertical(i, -1)]
            downs = [(v, c, _row_triplet(nb, v)) for v, c in nb.vertical(i, +1)]
            ups = [x for x in ups if x[2] is not None]
            downs = [x for x in downs if x[2] is not None]
            for (u, cu, top), (v, cv, bottom) in itertools.product(ups, downs):
                cells = top + row_mid + bottom
                if len(set(cells)) != 9:
                    continue
                syms = [symbols[c] for c in cells]
                if any(s is None for s in syms):
                    continue
                cands.append(CodewordCandidate(i, cells, tuple(syms), cu + cv))
            cands.sort(key=lambda c: c.cost)
            cands = cands[:max_candidates]
        out.append(cands)
    return out


def _row_triplet(nb: _Neighbors, i: int) -> tuple[int, int, int] | None:
    left = nb.horizontal(i, -1)
    right = nb.horizontal(i, +1)
    if left is None or right is None:
        return None
    return (left, i, right)


@dataclass
class MatchReport:
    n_dots: int = 0
    n_with_codeword: int = 0
    n_matched: int = 0
    n_exact: int = 0
    n_corrected: int = 0
    n_ambiguous: int = 0
    n_unmatched: int = 0
    n_inconsistent: int = 0
    n_duplicate: int = 0

    def as_rows(self) -> list[tuple[str, int]]:
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


class _Decoder:
    def __init__(self, grid: SymbolGrid, max_hamming: int):
        if max_hamming < 0:
            raise ValueError("max_hamming must be >= 0")
        if max_hamming > 0 and 2 * max_hamming >= grid.h_min:
            raise ValueError(
                f"max_hamming={max_hamming} is not below H_min/2 (H_min={grid.h_min}); "
                "decoding would not be unique"
            )
        self.grid = grid
        self.max_hamming = max_hamming
        self.table = grid.codeword_table()
        cw = grid.codewords()
        self.flat = cw.reshape(-1, cw.shape[2])
        self.n_cols = cw.shape[1]
        m, n = grid.window
        self.offset = (m // 2, n // 2)

    def decode(self, code: tuple[int, ...]):
        """Returns ``(grid_pos, hamming)``, ``("ambiguous", d)`` or ``None``."""
        hit = self.table.get(code)
        if hit is not None:
            return hit, 0
        if self.max_hamming == 0:
            return None
        dist = (self.flat != np.asarray(code)).sum(axis=1)
        d = int(dist.min())
        if d > self.max_hamming:
            return None
        where = np.flatnonzero(dist == d)
        if len(where) > 1:
            return "ambiguous", d
        r, c = divmod(int(where[0]), self.n_cols)
        return (r + self.offset[0], c + self.offset[1]), d


def match(
    candidates: Sequence[Sequence[CodewordCandidate]],
    grid: SymbolGrid,
    dots: Sequence[DetectedDot],
    pattern: PatternSpec | None = None,
    max_hamming: int = 0,
) -> tuple[list[Correspondence], MatchReport]:
    """Decode each dot's codeword candidates against the grid's windows.

    The first candidate (cheapest) that decodes wins. The projector point is
    the matched window's centre dot, placed with the pattern's geometry when
    given, else in grid units.

    Raises:
        ValueError: ``max_hamming`` too large for unique decoding.
    """
    dec = _Decoder(grid, max_hamming)
    report = MatchReport(n_dots=len(dots))
    out: list[Correspondence] = []
    for i, cands in enumerate(candidates):
        if not cands:
            continue
        report.n_with_codeword += 1
        found = None
        ambiguous = False
        for cand in cands:
            res = dec.decode(cand.codeword)
            if res is None:
                continue
            if res[0] == "ambiguous":
                ambiguous = True
                continue
            found = (cand, res[0], res[1])
            break
        if found is None:
            if ambiguous:
                report.n_ambiguous += 1
            else:
                report.n_unmatched += 1
            continue
        cand, (r, c), d = found
        if pattern is not None:
            pu, pv = pattern.projector_position(r, c)
            proj = (float(pu), float(pv))
        else:
            proj = (float(c), float(r))
        out.append(Correspondence(dots[i].centroid, proj, cand.codeword, d, (r, c), i, cand.cells))
        report.n_matched += 1
        if d == 0:
            report.n_exact += 1
        else:
            report.n_corrected += 1
    return out, report


_WINDOW_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


def enforce_neighbor_consistency(
    corrs: Sequence[Correspondence], report: MatchReport | None = None
) -> list[Correspondence]:
    """Keep matches backed by a window neighbour decoded to the adjacent grid cell.

    Grid positions claimed by more than one dot are dropped altogether.
    """
    by_dot = {c.dot_index: c for c in corrs}
    kept = []
    for c in corrs:
        r, col = c.grid_pos
        support = False
        for cell, (dr, dc) in zip(c.cells, _WINDOW_OFFSETS):
            if cell == c.dot_index:
                continue
            other = by_dot.get(cell)
            if other is not None and other.grid_pos == (r + dr, col + dc):
                support = True
                break
        if support:
            kept.append(c)
        elif report is not None:
            report.n_inconsistent += 1
    counts: dict[tuple[int, int], int] = {}
    for c in kept:
        counts[c.grid_pos] = counts.get(c.grid_pos, 0) + 1
    final = [c for c in kept if counts[c.grid_pos] == 1]
    if report is not None:
        report.n_duplicate += len(kept) - len(final)
        report.n_matched = len(final)
    return final


def write_correspondences(corrs: Sequence[Correspondence], path) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["camera_x", "camera_y", "proj_x", "proj_y", "grid_row", "grid_col", "hamming"])
    for c in corrs:
        w.writerow([format(c.camera_point[0], ".10g"), format(c.camera_point[1], ".10g"),
                    format(c.projector_point[0], ".10g"), format(c.projector_point[1], ".10g"),
                    c.grid_pos[0], c.grid_pos[1], c.hamming])
    return atomic_write_text(path, buf.getvalue())


def read_correspondences(path) -> list[Correspondence]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        Correspondence((float(r["camera_x"]), float(r["camera_y"])),
                       (float(r["proj_x"]), float(r["proj_y"])), (), int(r["hamming"]),
                       (int(r["grid_row"]), int(r["grid_col"])))
        for r in rows
    ]


def brute_force_decode(code: Sequence[int], grid: SymbolGrid) -> list[tuple[tuple[int, int], int]]:
    """All windows at the minimum Hamming distance from ``code`` (reference oracle)."""
    cw = window_codewords(grid.symbols, grid.window)
    best = None
    hits: list[tuple[tuple[int, int], int]] = []
    m, n = grid.window
    for r in range(cw.shape[0]):
        for c in range(cw.shape[1]):
            d = sum(int(a != b) for a, b in zip(cw[r, c].tolist(), code))
            if best is None or d < best:
                best, hits = d, [((r + m // 2, c + n // 2), d)]
            elif d == best:
                hits.append(((r + m // 2, c + n // 2), d))
    return hits
