"""CSV readers and writers for series, streams, labels, assignments and
cluster snapshots.  All files are UTF-8 with a mandatory header row."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .errors import IoError, ParseError

__all__ = [
    "SERIES_HEADER",
    "STREAM_HEADER",
    "ASSIGN_HEADER",
    "SNAPSHOT_HEADER",
    "LABELS_HEADER",
    "fmt",
    "write_rows",
    "read_series_csv",
    "write_series_csv",
    "read_stream_csv",
    "write_stream_csv",
    "read_labels_csv",
    "write_labels_csv",
    "read_assignments_csv",
    "write_assignments_csv",
    "write_snapshot",
    "read_snapshot",
]

SERIES_HEADER = ["series_id", "channel", "t_index", "value"]
STREAM_HEADER = ["arrival_order", "series_id", "channel", "t_index", "value"]
ASSIGN_HEADER = ["series_id", "cluster_id", "created", "distance"]
SNAPSHOT_HEADER = ["cluster_id", "size", "kind", "channel", "t_index", "value"]
LABELS_HEADER = ["series_id", "label"]


def fmt(x) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_rows(path, header, rows) -> None:
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _open_rows(path, required):
    """Yield ``(line_number, record)`` for each data row."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"{path}: line 1: missing columns {missing}")
        pos = {c: header.index(c) for c in header}
        for row in reader:
            line = reader.line_num
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            yield line, {c: row[i].strip() for c, i in pos.items()}


def _int(rec, key, path, line):
    try:
        return int(rec[key])
    except ValueError:
        raise ParseError(f"{path}: line {line}: {key} must be an integer, got {rec[key]!r}") from None


def _float(rec, key, path, line):
    try:
        v = float(rec[key])
    except ValueError:
        raise ParseError(f"{path}: line {line}: {key} must be a number, got {rec[key]!r}") from None
    if not np.isfinite(v):
        raise ParseError(f"{path}: line {line}: {key} is not finite")
    return v


def _assemble(path, entries):
    """Turn ``{series_id: {(channel, t): value}}`` into ``(n, ch)`` arrays.

    Channels are the sorted union over the whole file; every series must
    provide every channel for the same contiguous time indices ``0..n-1``.
    """
    channels = sorted({c for cells in entries.values() for c, _ in cells})
    out = {}
    for sid, cells in entries.items():
        per = {c: sorted(t for cc, t in cells if cc == c) for c in channels}
        for c in channels:
            if not per[c]:
                raise ParseError(f"{path}: series {sid!r} has no rows for channel {c}")
        n = len(per[channels[0]])
        for c in channels:
            if per[c] != list(range(n)):
                raise ParseError(
                    f"{path}: series {sid!r} channel {c}: time indices must be 0..{n - 1} "
                    "with no gaps or duplicates, and match across channels")
        if n < 2:
            raise ParseError(f"{path}: series {sid!r} needs at least two samples")
        arr = np.empty((n, len(channels)))
        for ci, c in enumerate(channels):
            for t in range(n):
                arr[t, ci] = cells[(c, t)]
        out[sid] = arr
    return out


def _collect(path, entries: dict, sid, ch, t, value, line):
    cells = entries.setdefault(sid, {})
    if (ch, t) in cells:
        raise ParseError(f"{path}: line {line}: duplicate entry for series {sid!r} "
                         f"channel {ch} t_index {t}")
    cells[(ch, t)] = value


def read_series_csv(path) -> dict:
    """Read ``series_id,channel,t_index,value``; returns ``{id: (n, ch)}`` in
    first-appearance order.  Extra columns are ignored."""
    entries: dict = {}
    for line, rec in _open_rows(path, SERIES_HEADER):
        _collect(path, entries, rec["series_id"], _int(rec, "channel", path, line),
                 _int(rec, "t_index", path, line), _float(rec, "value", path, line), line)
    if not entries:
        raise ParseError(f"{path}: no data rows")
    return _assemble(path, entries)


def _series_rows(series: dict, extra=()):
    for sid, arr in series.items():
        a = np.asarray(arr, dtype=float)
        a = a[:, None] if a.ndim == 1 else a
        for c in range(a.shape[1]):
            for t in range(a.shape[0]):
                yield [str(sid), c, t, a[t, c], *extra]


def write_series_csv(path, series: dict, warped_flag: bool | None = None) -> None:
    """Write series; with ``warped_flag`` a trailing ``warped`` column is added."""
    if warped_flag is None:
        write_rows(path, SERIES_HEADER, _series_rows(series))
    else:
        write_rows(path, SERIES_HEADER + ["warped"], _series_rows(series, (int(warped_flag),)))


def read_stream_csv(path) -> list:
    """Read a stream file; returns ``[(series_id, (n, ch) array)]`` by arrival.

    Rows must be sorted by ``arrival_order``; a series keeps one order value.
    """
    entries: dict = {}
    order: dict = {}
    last = None
    for line, rec in _open_rows(path, STREAM_HEADER):
        k = _int(rec, "arrival_order", path, line)
        if last is not None and k < last:
            raise ParseError(f"{path}: line {line}: arrival_order must be non-decreasing")
        last = k
        sid = rec["series_id"]
        if order.setdefault(sid, k) != k:
            raise ParseError(f"{path}: line {line}: series {sid!r} appears with two arrival orders")
        _collect(path, entries, sid, _int(rec, "channel", path, line),
                 _int(rec, "t_index", path, line), _float(rec, "value", path, line), line)
    if not entries:
        raise ParseError(f"{path}: no data rows")
    arrays = _assemble(path, entries)
    return [(sid, arrays[sid]) for sid in sorted(arrays, key=lambda s: order[s])]


def write_stream_csv(path, stream) -> None:
    def rows():
        for k, (sid, arr) in enumerate(stream):
            for r in _series_rows({sid: arr}):
                yield [k, *r]
    write_rows(path, STREAM_HEADER, rows())


def read_labels_csv(path) -> dict:
    out = {}
    for line, rec in _open_rows(path, LABELS_HEADER):
        if rec["series_id"] in out:
            raise ParseError(f"{path}: line {line}: duplicate series {rec['series_id']!r}")
        out[rec["series_id"]] = rec["label"]
    return out


def write_labels_csv(path, labels: dict) -> None:
    write_rows(path, LABELS_HEADER, ([str(k), str(v)] for k, v in labels.items()))


def read_assignments_csv(path) -> list:
    out = []
    for line, rec in _open_rows(path, ASSIGN_HEADER):
        created = rec["created"]
        if created not in ("0", "1"):
            raise ParseError(f"{path}: line {line}: created must be 0 or 1")
        out.append((rec["series_id"], _int(rec, "cluster_id", path, line), created == "1",
                    _float(rec, "distance", path, line)))
    return out


def write_assignments_csv(path, rows) -> None:
    """``rows`` are ``(series_id, cluster_id, created, distance)``."""
    write_rows(path, ASSIGN_HEADER, ([str(s), int(c), bool(cr), float(d)]
                                     for s, c, cr, d in rows))


def write_snapshot(directory, clusters) -> list:
    """One ``cluster_<id>.csv`` per cluster with centroid and scaled-variance rows."""
    directory = Path(directory)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc.strerror or exc}") from exc
    paths = []
    for c in clusters:
        def rows(c=c):
            for kind, arr in (("centroid", c.centroid), ("scaled_variance", c.scaled_variance)):
                a = np.asarray(arr)
                for ch in range(a.shape[1]):
                    for t in range(a.shape[0]):
                        yield [c.id, c.size, kind, ch, t, a[t, ch]]
        p = directory / f"cluster_{c.id}.csv"
        write_rows(p, SNAPSHOT_HEADER, rows())
        paths.append(p)
    return paths


def read_snapshot(path):
    """Read one snapshot file; returns ``(id, size, centroid, scaled_variance)``."""
    entries = {"centroid": {}, "scaled_variance": {}}
    ident = size = None
    for line, rec in _open_rows(path, SNAPSHOT_HEADER):
        kind = rec["kind"]
        if kind not in entries:
            raise ParseError(f"{path}: line {line}: unknown kind {kind!r}")
        cid, sz = _int(rec, "cluster_id", path, line), _int(rec, "size", path, line)
        if ident is None:
            ident, size = cid, sz
        elif (cid, sz) != (ident, size):
            raise ParseError(f"{path}: line {line}: mixed cluster rows")
        _collect(path, entries, kind, _int(rec, "channel", path, line),
                 _int(rec, "t_index", path, line), _float(rec, "value", path, line), line)
    arrays = _assemble(path, entries)
    return ident, size, arrays["centroid"], arrays["scaled_variance"]
