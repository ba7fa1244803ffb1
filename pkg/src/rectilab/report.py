"""Experiment report documents: canonical JSON, atomic writes.

Reports are self-contained (every default echoed back) and byte-stable:
same config + seeds -> identical bytes.  No timestamps.
"""

from __future__ import annotations

import json
import os
import tempfile

SCHEMA_VERSION = 1


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False)


def write_atomic(path, data: str | bytes) -> None:
    """Write via a temp file + rename so failures leave no partial file."""
    mode = "wb" if isinstance(data, bytes) else "w"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-report-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def make_report(experiment: str, config: dict, seed: int, results: dict,
                certificates: list[dict], ok: bool) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "experiment": experiment,
        "config": config,
        "seed": seed,
        "results": results,
        "certificates": certificates,
        "ok": bool(ok),
    }
