"""Atomic file writes (write to a temp file in the same directory, then rename)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

FLOAT_FORMAT = "%.10g"


def atomic_write_text(text: str, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_csv(df, path, float_format: str = FLOAT_FORMAT) -> None:
    atomic_write_text(df.to_csv(index=False, float_format=float_format, lineterminator="\n"), path)
