# src/ppslab/utils.py - Seeded random streams, digests and small helpers

import hashlib
import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np


def rng_stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return an independent generator for the named stream.

    The stream is fully determined by ``(seed, name, *indices)`` so stages and
    individual trials can be re-run in isolation and in any order.
    """
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *(int(i) for i in indices)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys and no whitespace variation."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def digest(data: Any) -> str:
    """Short sha256 digest of a JSON-able value."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]


def rate(count: int, total: int) -> float:
    """Fraction ``count/total``; 0.0 for an empty denominator."""
    return count / total if total else 0.0


def format_rate(count: int, total: int) -> str:
    return f"{count}/{total} ({100.0 * rate(count, total):.1f}%)"


def dump_json(path: Path, data: Any) -> Path:
    """Write UTF-8 JSON with sorted keys, numpy-aware."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, ensure_ascii=False, default=_json_default)
        fh.write("\n")
    return path


def load_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
