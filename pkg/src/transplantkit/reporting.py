"""Report serialization: canonical JSON plus atomic file writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def canonical_json(doc) -> str:
    """Stable rendering: sorted keys, fixed separators, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_atomic(path: str | Path, data: bytes | str):
    """Write via a temp file in the same directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def hexaddr(value: int) -> str:
    return f"{value:#010x}"
