"""Reproducibility stamps: which code, config and seed produced an artifact."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__


def code_hash() -> str:
    """Git-blob-style SHA-1 of the version string followed by every package source file."""
    pkg = Path(__file__).parent
    content = __version__.encode() + b"\n" + b"".join(p.read_bytes() for p in sorted(pkg.glob("*.py")))
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def write_stamp(out: Path, command: str, seed: int, config: dict, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"command": command, "seed": seed, "version": __version__, "code_hash": code_hash(), "config": config,
             **(extra or {})}
    path = out / "stamp.json"
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")
    return path
