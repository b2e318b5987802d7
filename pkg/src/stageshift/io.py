"""Shared file formats.

Configuration, parameter, protocol and result records are JSON objects
with fixed field names; tables are comma-separated with fixed headers.
Outputs are written atomically (temporary file, then rename).
"""

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

from .errors import InvalidParameter, TableFormatError
from .natural_history import NaturalHistoryParams, SojournHypothesis
from .projection import ScreeningProtocol


def _clean(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def dumps(record):
    return json.dumps(_clean(record), indent=2, sort_keys=False) + "\n"


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, record):
    return atomic_write(path, dumps(record))


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise TableFormatError(f"{path}: expected a JSON object")
    return data


def table_text(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _fmt(v.item())
    return "" if v is None else v


def write_table(path, rows, columns):
    return atomic_write(path, table_text(rows, columns))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def params_record(params, **extra):
    rec = params.to_dict()
    rec.update(extra)
    return rec


def load_params(path):
    return NaturalHistoryParams.from_dict(read_json(path))


def load_protocol(path):
    return ScreeningProtocol.from_dict(read_json(path))


def hypothesis_from(record):
    try:
        return SojournHypothesis(float(record["omst"]), float(record["lmst"]))
    except KeyError as exc:
        raise InvalidParameter(f"hypothesis needs omst and lmst (missing {exc.args[0]})") from None
