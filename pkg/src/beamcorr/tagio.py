"""Binary time-tag files and CSV exports.

A tag file is a 32-byte little-endian header followed by ``count`` unsigned
64-bit tags::

    offset  size  field
    0       4     magic b"ATTG"
    4       2     version (1)
    6       2     channel id
    8       8     resolution, ps
    16      8     count
    24      8     duration, ps
"""

from __future__ import annotations

import csv
import os
import struct
from pathlib import Path

import numpy as np

from .correlator import CoincidenceHistogram
from .detection import PS, TimeTagStream
from .errors import CorruptionError, ValidationError

MAGIC = b"ATTG"
VERSION = 1
HEADER = struct.Struct("<4sHHQQQ")
_PAYLOAD = np.dtype("<u8")


def write_tags(stream, path):
    """Write ``stream`` atomically (temporary file, then rename)."""
    tags = np.asarray(stream.tags, dtype=np.int64)
    if tags.size and tags[0] < 0:
        raise ValidationError("tags must be non-negative")
    if tags.size > 1 and np.any(np.diff(tags) < 0):
        raise ValidationError("tags must be sorted ascending")
    if not 0 <= int(stream.channel) < 2**16:
        raise ValidationError("channel id must fit in 16 bits")
    path = Path(path)
    header = HEADER.pack(
        MAGIC, VERSION, int(stream.channel), stream.resolution_ps, tags.size, stream.duration_ps
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(tags.astype(_PAYLOAD).tobytes())
    os.replace(tmp, path)


def read_tags(path):
    """Read a tag file; raises :class:`CorruptionError` on any inconsistency."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"tag file not found: {path}") from None
    if len(data) < HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, channel, resolution, count, duration = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptionError(f"{path}: unsupported version {version}")
    if resolution == 0:
        raise CorruptionError(f"{path}: zero resolution")
    expected = HEADER.size + count * _PAYLOAD.itemsize
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: payload holds {len(data) - HEADER.size} bytes, header declares {count} tags"
        )
    raw = np.frombuffer(data, dtype=_PAYLOAD, offset=HEADER.size, count=count)
    if count and raw.max() >= 2**63:
        raise CorruptionError(f"{path}: tag out of range")
    tags = raw.astype(np.int64)
    if count > 1 and np.any(np.diff(tags) < 0):
        raise CorruptionError(f"{path}: tags not sorted")
    return TimeTagStream(channel, tags, duration, resolution)


def write_csv(path, header, columns):
    cols = [np.asarray(c) for c in columns]
    fmt = ["%d" if c.dtype.kind in "biu" else "%.17g" for c in cols]
    table = np.column_stack([c.astype(np.int64) if c.dtype.kind == "b" else c for c in cols])
    if not cols[0].size:
        table = np.empty((0, len(cols)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, table, fmt=fmt, delimiter=",")


def read_csv(path):
    """Header and float columns of a CSV written by this module."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CorruptionError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    try:
        cols = np.array(body, dtype=float).reshape(len(body), len(header))
    except ValueError:
        raise CorruptionError(f"{path}: malformed CSV body") from None
    return header, {h: cols[:, i] for i, h in enumerate(header)}


def write_g2_csv(hist, path):
    """``tau_s,counts,g2`` rows at the left edge of each bin."""
    g2 = hist.normalized if hist.normalized is not None else np.full(hist.counts.shape, np.nan)
    write_csv(path, ["tau_s", "counts", "g2"], [hist.left, hist.counts, g2])


def write_g3_csv(hist, path):
    """``tau1_s,tau2_s,counts,g3`` rows at the lower-left corner of each cell;
    masked cells carry ``nan``."""
    t1, t2 = np.meshgrid(hist.tau1_edges[:-1], hist.tau2_edges[:-1], indexing="ij")
    g3 = hist.normalized if hist.normalized is not None else np.full(hist.counts.shape, np.nan)
    write_csv(
        path,
        ["tau1_s", "tau2_s", "counts", "g3"],
        [t1.ravel(), t2.ravel(), hist.counts.ravel(), g3.ravel()],
    )


def read_g2_csv(path):
    """Rebuild a normalised histogram from ``tau_s,counts,g2`` CSV."""
    header, cols = read_csv(path)
    if header[:3] != ["tau_s", "counts", "g2"]:
        raise CorruptionError(f"{path}: expected header tau_s,counts,g2")
    tau = cols["tau_s"]
    if tau.size < 2:
        raise CorruptionError(f"{path}: need at least two rows")
    w = int(round((tau[1] - tau[0]) / PS))
    lo = int(round(tau[0] / PS))
    if w <= 0 or np.any(np.abs(np.diff(tau) / PS - w) > 0.5):
        raise CorruptionError(f"{path}: delays are not evenly spaced")
    return CoincidenceHistogram(
        w, lo, cols["counts"].astype(np.int64), 0, 0, 0.0, normalized=cols["g2"], norm_method="file"
    )


def write_velocity_csv(density, path):
    write_csv(path, ["v_mps", "density"], [density.grid, density.values])


def write_ledger_csv(ledger, path):
    write_csv(path, list(ledger.COLUMNS), [getattr(ledger, c) for c in ledger.COLUMNS])


def write_emissions(events, path_base, duration, resolution_ps=1):
    """Raw emission dump: a tag file of emission times plus an ``atom_id``
    sidecar CSV with positions, row for row."""
    ticks = np.floor(events.time / (resolution_ps * PS)).astype(np.int64) * resolution_ps
    stream = TimeTagStream(0, ticks, int(round(duration / PS)), resolution_ps)
    write_tags(stream, f"{path_base}.attg")
    write_csv(f"{path_base}.csv", ["atom_id", "position_m"], [events.atom_id, events.position])
