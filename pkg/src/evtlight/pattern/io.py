"""Pattern file (JSON) reader and writer.

Keys are always written in the same order so pattern files diff cleanly.
"""

from __future__ import annotations

import os

import numpy as np

from evtlight._io import read_json, write_json
from evtlight.pattern.psm import SymbolGrid
from evtlight.pattern.signals import ConfigurationError, PatternSpec, SignalSpec

FORMAT_TAG = "evtlight-pattern/1"


def pattern_to_dict(pattern: PatternSpec) -> dict:
    grid = pattern.grid
    return {
        "format": FORMAT_TAG,
        "kind": pattern.kind,
        "rows": grid.rows,
        "cols": grid.cols,
        "k": grid.k,
        "window": list(grid.window),
        "H_min": grid.h_min,
        "seed": grid.seed,
        "dot_pitch": pattern.dot_pitch,
        "dot_size": pattern.dot_size,
        "origin": list(pattern.origin),
        "stripe_period": pattern.stripe_period,
        "alphabet": [
            {
                "symbol": s,
                "frequency_hz": pattern.alphabet[s].frequency,
                "dutycycle": pattern.alphabet[s].dutycycle,
            }
            for s in sorted(pattern.alphabet)
        ],
        "symbols": grid.symbols.reshape(-1).tolist(),
        "phases": pattern.phases.reshape(-1).tolist(),
    }


def pattern_from_dict(doc: dict) -> PatternSpec:
    try:
        rows, cols = int(doc["rows"]), int(doc["cols"])
        symbols = np.asarray(doc["symbols"], dtype=np.int64).reshape(rows, cols)
        phases = np.asarray(doc["phases"], dtype=np.float64).reshape(rows, cols)
        grid = SymbolGrid(
            symbols,
            k=int(doc["k"]),
            window=tuple(doc.get("window", (3, 3))),
            h_min=int(doc.get("H_min", 1)),
            seed=doc.get("seed"),
        )
        alphabet = {
            int(a["symbol"]): SignalSpec(float(a["frequency_hz"]), float(a["dutycycle"]))
            for a in doc["alphabet"]
        }
        origin = doc.get("origin")
        return PatternSpec(
            grid,
            alphabet,
            phases,
            dot_pitch=int(doc["dot_pitch"]),
            dot_size=int(doc["dot_size"]),
            origin=tuple(origin) if origin is not None else None,
            kind=doc.get("kind", "psm"),
            stripe_period=doc.get("stripe_period"),
            seed=doc.get("seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad pattern document: {exc}") from exc


def save_pattern(pattern: PatternSpec, path: str | os.PathLike) -> int:
    return write_json(path, pattern_to_dict(pattern))


def load_pattern(path: str | os.PathLike) -> PatternSpec:
    return pattern_from_dict(read_json(path))
