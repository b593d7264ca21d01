"""Small file helpers shared by the writers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> int:
    """Write ``data`` to ``path`` through a temp file and a rename.

    Readers never observe a half-written file. Returns the byte count.
    """
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return len(data)


def atomic_write_text(path: str | os.PathLike, text: str) -> int:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, doc: Any) -> int:
    # Key order is the insertion order of ``doc``; callers build documents in a fixed order.
    return atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
