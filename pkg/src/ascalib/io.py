"""CSV ingestion/emission and flat key-value run configs.

Dialect is fixed: comma separator, first row headers, UTF-8, '.' decimal,
literal ``NA`` as the missing-value token.  Machine CSVs serialize floats via
their shortest round-trip representation.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CsvFormatError
from .prep import RawResponseMatrix

MISSING_TOKEN = "NA"


def _read_rows(path: str | Path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise CsvFormatError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]  # tolerate trailing blank lines
    if len(rows) < 2:
        raise CsvFormatError(f"{path}: need a header and at least one data row")
    width = len(rows[0])
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise CsvFormatError(
                f"{path}: line {i} has {len(row)} fields, expected {width}"
            )
    return rows


def read_data_csv(path: str | Path) -> RawResponseMatrix:
    """Response CSV: first column sample id, remaining columns numeric (NA = missing)."""
    rows = _read_rows(path)
    header = rows[0]
    variables = tuple(header[1:])
    if not variables:
        raise CsvFormatError(f"{path}: no response columns after the sample id")
    sample_ids = tuple(r[0] for r in rows[1:])
    if len(set(sample_ids)) != len(sample_ids):
        raise CsvFormatError(f"{path}: duplicate sample ids")
    values = np.empty((len(sample_ids), len(variables)))
    for i, row in enumerate(rows[1:], start=2):
        for j, token in enumerate(row[1:]):
            token = token.strip()
            if token == MISSING_TOKEN:
                values[i - 2, j] = np.nan
                continue
            try:
                values[i - 2, j] = float(token)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {i}, column {variables[j]!r}: "
                    f"{token!r} is not a number or {MISSING_TOKEN}"
                ) from None
    return RawResponseMatrix(values, variables, sample_ids)


def read_design_csv(path: str | Path) -> tuple[tuple[str, ...], dict[str, list[str]]]:
    """Design CSV: first column sample id, one column of level labels per factor."""
    rows = _read_rows(path)
    header = rows[0]
    names = header[1:]
    if not names:
        raise CsvFormatError(f"{path}: no factor columns after the sample id")
    if len(set(names)) != len(names):
        raise CsvFormatError(f"{path}: duplicate factor columns")
    sample_ids = tuple(r[0] for r in rows[1:])
    if len(set(sample_ids)) != len(sample_ids):
        raise CsvFormatError(f"{path}: duplicate sample ids")
    columns = {name: [r[j + 1].strip() for r in rows[1:]] for j, name in enumerate(names)}
    return sample_ids, columns


def align_design_to_data(
    data_ids: Sequence[str],
    design_ids: Sequence[str],
    columns: Mapping[str, list[str]],
) -> dict[str, list[str]]:
    """Reorder design columns to the data's sample order, by id."""
    index = {sid: i for i, sid in enumerate(design_ids)}
    missing = [sid for sid in data_ids if sid not in index]
    if missing:
        raise ConfigError(
            f"design table lacks sample id(s): {', '.join(missing[:5])}"
            + ("..." if len(missing) > 5 else "")
        )
    order = [index[sid] for sid in data_ids]
    return {name: [col[i] for i in order] for name, col in columns.items()}


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal representation."""
    return repr(float(x))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([
                fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row
            ])
    return path


def read_config(path: str | Path) -> dict[str, str]:
    """Flat `key = value` text file; blank lines and '#' comments ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno} is not a `key = value` pair")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}: duplicate key {key!r} (line {lineno})")
        out[key] = value.strip()
    return out


def config_hash(settings: Mapping[str, object]) -> str:
    """Stable digest of a configuration mapping (order-insensitive)."""
    canon = "\n".join(f"{k}={settings[k]!r}" for k in sorted(settings))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
