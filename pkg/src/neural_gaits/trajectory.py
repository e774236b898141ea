"""Closed-loop trajectory logs and their on-disk format.

CSV columns, in this fixed order::

    t, q_u, a1, a2, dq_u, da1, da2, z1, z2, u1, u2, p_z, event

``event`` is 1 on the pre-impact sample of every impact and 0 elsewhere.
Metadata (model tag, checkpoint id, seed, format version) goes in a JSON
sidecar ``<name>.json`` next to the CSV.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

LOG_VERSION = 1
COLUMNS = ("t", "q_u", "a1", "a2", "dq_u", "da1", "da2", "z1", "z2", "u1", "u2", "p_z", "event")


class LogFormatError(ValueError):
    pass


@dataclass
class TrajectoryLog:
    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    z: np.ndarray
    u: np.ndarray
    p_z: np.ndarray
    event: np.ndarray
    barriers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = len(self.t)
        self.q = np.asarray(self.q, dtype=float).reshape(n, 3)
        self.dq = np.asarray(self.dq, dtype=float).reshape(n, 3)
        self.z = np.asarray(self.z, dtype=float).reshape(n, 2)
        self.u = np.asarray(self.u, dtype=float).reshape(n, 2)
        self.p_z = np.asarray(self.p_z, dtype=float).reshape(n)
        self.event = np.asarray(self.event, dtype=int).reshape(n)
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise LogFormatError("log times must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @property
    def impact_indices(self):
        return np.flatnonzero(self.event == 1)

    def segments(self):
        """Index ranges [start, stop) of the continuous phases."""
        cuts = list(self.impact_indices + 1)
        bounds = [0] + [c for c in cuts if 0 < c < len(self)] + [len(self)]
        return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def table(self):
        return np.column_stack([self.t, self.q, self.dq, self.z, self.u, self.p_z, self.event])


def save_log(log: TrajectoryLog, path):
    """Write ``path`` (CSV) and its JSON sidecar."""
    path = os.fspath(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for row in log.table():
            w.writerow([repr(float(v)) for v in row[:-1]] + [str(int(row[-1]))])
    meta = dict(log.meta)
    meta["format"] = "neural-gaits-log"
    meta["version"] = LOG_VERSION
    meta["columns"] = list(COLUMNS)
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def sidecar_path(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def load_log(path) -> TrajectoryLog:
    path = os.fspath(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise LogFormatError(f"cannot read log: {e}") from e
    if not rows or tuple(rows[0]) != COLUMNS:
        raise LogFormatError("unexpected CSV header")
    if len(rows) < 2:
        raise LogFormatError("log has no samples")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as e:
        raise LogFormatError(f"bad number in log: {e}") from e
    if data.shape[1] != len(COLUMNS):
        raise LogFormatError("wrong number of columns")
    meta = {}
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path)) as f:
            meta = json.load(f)
        if meta.get("version", LOG_VERSION) != LOG_VERSION:
            raise LogFormatError(f"unsupported log version {meta.get('version')}")
    return TrajectoryLog(t=data[:, 0], q=data[:, 1:4], dq=data[:, 4:7], z=data[:, 7:9],
                         u=data[:, 9:11], p_z=data[:, 11], event=data[:, 12].astype(int), meta=meta)
