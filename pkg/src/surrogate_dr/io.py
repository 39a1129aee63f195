"""CSV readers and writers for the command-line tool.

Numbers are written with 17 significant digits so every file round-trips
exactly.  All writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import csv
import json
import os
import re
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .spectral import Basis, orthonormalize
from .surrogate import PrimarySample, ReplicationSample, SplitHalvesSample, ValidationSample


def fmt(v: float) -> str:
    return format(float(v), ".17g")


@contextmanager
def atomic_write(path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _to_jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def jsonable(d: dict) -> dict:
    return {k: _to_jsonable(v) for k, v in d.items()}


# ------------------------------------------------------------------ reading


def read_table(path) -> tuple[list[str], np.ndarray, list[str]]:
    """Read a numeric CSV with a header row.

    Leading ``#`` lines are returned separately as comments.  Any parse
    problem raises :class:`ParseError` carrying the 1-based line number.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    comments: list[str] = []
    header: list[str] | None = None
    rows: list[list[float]] = []
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if row[0].startswith("#"):
            if header is None:
                comments.append(",".join(row).lstrip("#").strip())
                continue
            raise ParseError("comment line inside data", lineno)
        if header is None:
            header = [c.strip() for c in row]
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
        try:
            values = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
        if not all(np.isfinite(values)):
            raise ParseError("non-finite value", lineno)
        rows.append(values)
    if header is None:
        raise ParseError(f"{path} has no header row")
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    return header, data, comments


def _indexed(names: list[str], pattern: str) -> list[int]:
    out = []
    for name in names:
        m = re.fullmatch(pattern, name)
        if m is None:
            return []
        out.append(int(m.group(1)))
    return out


def _require_sequence(idx: list[int], what: str) -> None:
    if idx != list(range(1, len(idx) + 1)):
        raise SchemaError(f"{what} columns must be numbered 1..k in order")


def read_primary(path) -> PrimarySample:
    """Primary sample: header ``y,w1,...,wr`` (an adjusted file ``y,u1..up`` also loads)."""
    header, data, _ = read_table(path)
    if len(header) < 2 or header[0] != "y":
        raise SchemaError("primary sample header must start with 'y'")
    idx = _indexed(header[1:], r"w(\d+)") or _indexed(header[1:], r"u(\d+)")
    if not idx:
        raise SchemaError(f"unexpected primary columns {header[1:]}")
    _require_sequence(idx, "predictor")
    if data.shape[0] < 2:
        raise SchemaError("primary sample needs at least 2 rows")
    return PrimarySample(y=data[:, 0], w=data[:, 1:])


def read_validation(path) -> ValidationSample:
    header, data, _ = read_table(path)
    xs = [i for i, h in enumerate(header) if re.fullmatch(r"x\d+", h)]
    ws = [i for i, h in enumerate(header) if re.fullmatch(r"w\d+", h)]
    if not xs or not ws or len(xs) + len(ws) != len(header) or max(xs) > min(ws):
        raise SchemaError("validation header must be x1..xp,w1..wr")
    _require_sequence([int(header[i][1:]) for i in xs], "x")
    _require_sequence([int(header[i][1:]) for i in ws], "w")
    return ValidationSample(x=data[:, xs], w=data[:, ws])


def read_replication(path) -> ReplicationSample:
    header, data, _ = read_table(path)
    if len(header) % 2:
        raise SchemaError("replication header must be w1_1..wp_1,w1_2..wp_2")
    p = len(header) // 2
    expected = [f"w{j}_1" for j in range(1, p + 1)] + [f"w{j}_2" for j in range(1, p + 1)]
    if header != expected:
        raise SchemaError(f"replication header must be {','.join(expected)}")
    return ReplicationSample(w1=data[:, :p], w2=data[:, p:])


def read_split_halves(path) -> SplitHalvesSample:
    """Split-halves file: ``v_a,v_b``, then ``wj_a,wj_b`` pairs, then ``xj`` columns."""
    header, data, _ = read_table(path)
    if header[:2] != ["v_a", "v_b"]:
        raise SchemaError("split-halves header must start with v_a,v_b")
    prone = []
    pos = 2
    while pos + 1 < len(header) and re.fullmatch(r"w\d+_a", header[pos]):
        j = int(header[pos][1:-2])
        if header[pos + 1] != f"w{j}_b":
            raise SchemaError(f"column {header[pos]} must be followed by w{j}_b")
        prone.append((j - 1, data[:, pos], data[:, pos + 1]))
        pos += 2
    free_names = header[pos:]
    free_idx = _indexed(free_names, r"x(\d+)") if free_names else []
    if free_names and not free_idx:
        raise SchemaError(f"unexpected split-halves columns {free_names}")
    p = len(prone) + len(free_idx)
    expected_free = sorted(set(range(p)) - {j for j, _, _ in prone})
    if [i - 1 for i in free_idx] != expected_free:
        raise SchemaError("every coordinate must appear exactly once, error-free columns in order")
    if data.shape[0] < 2:
        raise SchemaError("split-halves sample needs at least 2 rows")
    return SplitHalvesSample(
        error_prone=prone,
        error_free=data[:, pos:],
        response_halves=(data[:, 0], data[:, 1]),
    )


def read_basis(path) -> tuple[Basis, dict]:
    """Basis file: ``# key: value`` metadata lines, then a headerless p x q body."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    meta: dict[str, str] = {}
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if rows:
                raise ParseError("metadata line after the matrix body", lineno)
            key, _, value = line.lstrip("#").partition(":")
            meta[key.strip()] = value.strip()
            continue
        try:
            vals = [float(c) for c in line.split(",")]
        except ValueError:
            raise ParseError("non-numeric basis entry", lineno) from None
        if rows and len(vals) != len(rows[0]):
            raise ParseError("ragged basis row", lineno)
        rows.append(vals)
    if "error" in meta:
        raise SchemaError(f"{path} records a failed fit: {meta['error']}")
    if not rows:
        raise ParseError(f"{path} has no basis rows")
    M = np.asarray(rows, dtype=float)
    try:
        return Basis(M), meta
    except Exception:
        return orthonormalize(M), meta


def read_config(path) -> dict:
    """Flat ``key=value`` file or a JSON object."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            cfg = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        return cfg
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        cfg[key.strip()] = _parse_value(value.strip())
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(t.strip()) for t in text.split(",")]
    return text


# ------------------------------------------------------------------ writing


def write_table(path, header: list[str], rows: np.ndarray | list, comments: list[str] = ()) -> None:
    with atomic_write(path) as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")


def write_basis(path, basis: Basis | None, meta: dict) -> None:
    with atomic_write(path) as fh:
        for key, value in meta.items():
            if isinstance(value, (list, tuple, np.ndarray)):
                value = " ".join(fmt(v) for v in value)
            elif isinstance(value, float):
                value = fmt(value)
            fh.write(f"# {key}: {value}\n")
        if basis is not None:
            for row in basis.columns:
                fh.write(",".join(fmt(v) for v in row) + "\n")
