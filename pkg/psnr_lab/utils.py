import csv
import zlib
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from psnr_lab.errors import ConfigError


def substream(seed: int, name: str) -> np.random.Generator:
    """
    Derive an independent random generator for a named purpose.

    The same `(seed, name)` pair always yields the same stream, and streams with
    different names never share state, so e.g. changing the number of dropout
    draws cannot shift the noise draws.

    Args:
        seed: The user-level seed.
        name: The purpose of the stream ("split", "init", "noise", ...).

    Returns:
        A seeded `numpy.random.Generator`.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def format_cell(value: Any) -> str:
    """Render a CSV cell so that reruns produce byte-identical files."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    """Write rows under a fixed header with LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])


def _parse_list(text: str, kind: type) -> list:
    values = []
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            values.append(kind(part))
        except ValueError as e:
            raise ConfigError(f"not a valid {kind.__name__}: {part.strip()!r} in {text!r}") from e
    return values


def parse_int_list(text: str) -> list[int]:
    """Parse "2,4,8" into [2, 4, 8]."""
    return _parse_list(text, int)


def parse_float_list(text: str) -> list[float]:
    return _parse_list(text, float)
