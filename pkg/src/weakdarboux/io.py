"""Reading and writing fields, metrics, charts and JSON reports.

Field CSV files start with one comment line holding the grid as JSON,
followed by a column header and one row per node (``x, y, values...``) in
row-major order.  The binary layout is::

    b"WDF1" | nx, ny, ncomp (uint32 LE) | x0, y0, hx, hy (float64 LE) | row-major float64 data

Every file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import io as _io
import json
import os
import struct
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fields import ComplexField, Grid2D, ScalarField
from .geometry import MetricField

SCHEMA_VERSION = 1
_MAGIC = b"WDF1"
_HEADER = struct.Struct("<4s3I4d")


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write_text(path, dumps(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}", location=[str(path)]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc.msg}", location=[exc.lineno, exc.colno]) from exc


def write_report(path, body: dict, config: dict, timestamp=None):
    """JSON report with ``schema_version``, the embedded config and a UTC timestamp."""
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    doc = dict(body)
    doc["schema_version"] = SCHEMA_VERSION
    doc["config"] = config
    doc["timestamp"] = timestamp
    write_json(path, doc)
    return doc


# ---------------------------------------------------------------------------
# fields


def _columns(field):
    if isinstance(field, ComplexField):
        return {"re": field.values.real, "im": field.values.imag}
    return {"value": field.values}


def write_fields_csv(path, grid: Grid2D, columns: dict, meta=None):
    """CSV with ``x, y`` followed by one column per entry of ``columns``."""
    X, Y = grid.mesh()
    head = {"grid": grid.to_dict(), **(meta or {})}
    names = list(columns)
    data = np.column_stack([X.ravel(), Y.ravel()] + [np.asarray(columns[n], dtype=float).ravel() for n in names])
    buf = _io.StringIO()
    buf.write("# " + json.dumps(_jsonable(head), sort_keys=True) + "\n")
    buf.write(",".join(["x", "y"] + names) + "\n")
    np.savetxt(buf, data, delimiter=",", fmt="%.17g")
    atomic_write_text(path, buf.getvalue())


def write_field_csv(path, field, meta=None):
    write_fields_csv(path, field.grid, _columns(field), meta)


def read_fields_csv(path):
    """Returns ``(grid, {name: array}, meta)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            names = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}", location=[str(path)]) from exc
    except ValueError as exc:
        raise ConfigError(f"malformed field file {path}: {exc}", location=[str(path)]) from exc
    if not first.startswith("#") or names[:2] != ["x", "y"]:
        raise ConfigError(f"{path} is not a field CSV (missing grid header)", location=[str(path)])
    meta = json.loads(first[1:])
    gd = meta.pop("grid")
    grid = Grid2D(tuple(gd["origin"]), tuple(gd["spacing"]), tuple(gd["dims"]), gd.get("margin", 2))
    if data.shape != (grid.dims[0] * grid.dims[1], len(names)):
        raise ConfigError(f"{path}: {data.shape[0]} rows for a {grid.dims} grid", location=[str(path)])
    cols = {n: data[:, k].reshape(grid.dims) for k, n in enumerate(names[2:], start=2)}
    return grid, cols, meta


def read_field_csv(path):
    """A :class:`ScalarField`, or a :class:`ComplexField` for ``re, im`` files."""
    grid, cols, _ = read_fields_csv(path)
    if set(cols) == {"re", "im"}:
        return ComplexField(grid, cols["re"] + 1j * cols["im"])
    if "value" not in cols:
        raise ConfigError(f"{path} has columns {sorted(cols)}, expected value or re/im", location=[str(path)])
    return ScalarField(grid, cols["value"])


def write_field_binary(path, field):
    cols = list(_columns(field).values())
    g = field.grid
    head = _HEADER.pack(_MAGIC, g.dims[0], g.dims[1], len(cols), *g.origin, *g.spacing)
    body = np.stack(cols).astype("<f8").tobytes(order="C")
    _atomic_write(path, head + body)


def read_field_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path} is too short for a field file", location=[str(path)])
    magic, nx, ny, nc, x0, y0, hx, hy = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ConfigError(f"{path} is not a binary field file", location=[str(path)])
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != nc * nx * ny:
        raise ConfigError(f"{path}: payload has {data.size} doubles, expected {nc * nx * ny}", location=[str(path)])
    data = data.reshape(nc, nx, ny)
    grid = Grid2D((x0, y0), (hx, hy), (nx, ny))
    if nc == 2:
        return ComplexField(grid, data[0] + 1j * data[1])
    return ScalarField(grid, data[0].copy())


# ---------------------------------------------------------------------------
# metrics and charts


def write_metric(directory, g: MetricField, meta=None):
    """``E.csv``, ``F.csv``, ``G.csv`` plus ``metric.json``."""
    d = Path(directory)
    for name in ("E", "F", "G"):
        write_field_csv(d / f"{name}.csv", g.field(name))
    write_json(d / "metric.json", {"schema_version": SCHEMA_VERSION, "grid": g.grid.to_dict(),
                                   "files": {"E": "E.csv", "F": "F.csv", "G": "G.csv"}, **(meta or {})})


def read_metric(directory) -> MetricField:
    d = Path(directory)
    desc = read_json(d / "metric.json")
    files = desc.get("files", {"E": "E.csv", "F": "F.csv", "G": "G.csv"})
    parts = {k: read_field_csv(d / files[k]) for k in ("E", "F", "G")}
    grid = parts["E"].grid
    for k in ("F", "G"):
        if not parts[k].grid.same_as(grid):
            raise ConfigError(f"metric entry {k} is on a different grid than E", location=[str(d / files[k])])
    return MetricField(grid, parts["E"].values, parts["F"].values, parts["G"].values)


def write_chart(directory, chart):
    """``psi.csv`` (re/im on the metric grid), ``sigma.csv`` (image grid) and ``quality.json``."""
    d = Path(directory)
    write_field_csv(d / "psi.csv", chart.psi)
    write_fields_csv(d / "sigma.csv", chart.image_grid, {"value": chart.sigma.values,
                                                          "mask": chart.mask.astype(float)})
    write_json(d / "quality.json", chart.quality)


def read_chart_files(directory):
    """``(psi, sigma, mask, quality)`` as stored by :func:`write_chart`."""
    d = Path(directory)
    psi = read_field_csv(d / "psi.csv")
    grid, cols, _ = read_fields_csv(d / "sigma.csv")
    return psi, ScalarField(grid, cols["value"]), cols["mask"] > 0.5, read_json(d / "quality.json")


def write_immersion(path, r):
    """Immersion components ``r1, r2, ...`` as columns of one CSV."""
    write_fields_csv(path, r.grid, {f"r{k + 1}": c.values for k, c in enumerate(r.components)})


def read_immersion(path):
    from .flatten import ImmersionField

    grid, cols, _ = read_fields_csv(path)
    names = sorted((n for n in cols if n.startswith("r")), key=lambda n: int(n[1:]))
    if not names:
        raise ConfigError(f"{path} has no immersion components r1, r2, ...", location=[str(path)])
    return ImmersionField(grid, [ScalarField(grid, cols[n]) for n in names])
