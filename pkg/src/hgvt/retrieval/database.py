"""Fixed-width binary embedding database with a JSON sidecar.

File layout (little-endian): ``b"HGDB" | u32 version | u32 n | n-byte JSON header |
records``.  Each record is one numpy structured row; payload values are f32.
The sidecar ``<file>.json`` repeats the header for tooling.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .pruning import Record

MAGIC = b"HGDB"
VERSION = 1


def record_dtype(width: int, edge_width: int, max_edges: int) -> np.dtype:
    return np.dtype([
        ("id", "<i8"),
        ("label", "<i8"),
        ("n_edges", "<i4"),
        ("var_mean", "<f4"),
        ("centroid", "<f4", (width,)),
        ("delta", "<f4", (width,)),
        ("contributions", "<f4", (max_edges,)),
        ("edges", "<f4", (max_edges, edge_width)),
    ])


class EmbeddingDB:
    """Immutable collection of records with array views for vectorised search."""

    def __init__(self, records: list[Record]):
        if not records:
            raise ValueError("empty database")
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        widths = {r.centroid.shape[0] for r in records}
        ewidths = {r.edges.shape[1] for r in records}
        if len(widths) != 1 or len(ewidths) != 1:
            raise ValueError("records must share centroid and hyperedge widths")
        self.records = list(records)
        self.width = widths.pop()
        self.edge_width = ewidths.pop()
        self.max_edges = max(r.edges.shape[0] for r in records)
        self.ids = np.array(ids, dtype=np.int64)
        self.labels = np.array([r.label for r in records], dtype=np.int64)
        self.centroids = np.stack([r.centroid for r in records])
        self.var_mean = np.array([r.var_mean for r in records])
        self.delta = np.stack([r.delta for r in records])
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        self._bins: dict[int, tuple[object, list[np.ndarray]]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, id: int) -> bool:
        return int(id) in self._index

    def get(self, id: int) -> Record:
        return self.records[self._index[int(id)]]

    def position(self, id: int) -> int:
        return self._index[int(id)]

    def edge_bins(self, hasher) -> list[np.ndarray]:
        """Bin index of every stored hyperedge under ``hasher`` (cached per hasher object)."""
        cached = self._bins.get(id(hasher))
        if cached is None or cached[0] is not hasher:
            cached = (hasher, [hasher.assign(r.edges) for r in self.records])
            self._bins[id(hasher)] = cached
        return cached[1]

    def header(self) -> dict:
        return {"version": VERSION, "count": len(self), "width": self.width,
                "edge_width": self.edge_width, "max_edges": self.max_edges,
                "record_bytes": record_dtype(self.width, self.edge_width, self.max_edges).itemsize}

    def save(self, path: str | Path) -> None:
        dt = record_dtype(self.width, self.edge_width, self.max_edges)
        rows = np.zeros(len(self), dtype=dt)
        for k, r in enumerate(self.records):
            ne = r.edges.shape[0]
            rows[k]["id"], rows[k]["label"], rows[k]["n_edges"] = r.id, r.label, ne
            rows[k]["var_mean"] = r.var_mean
            rows[k]["centroid"] = r.centroid
            rows[k]["delta"] = r.delta
            rows[k]["contributions"][:ne] = r.contributions
            rows[k]["edges"][:ne] = r.edges
        head = json.dumps(self.header(), sort_keys=True).encode()
        path = Path(path)
        path.write_bytes(MAGIC + struct.pack("<II", VERSION, len(head)) + head + rows.tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.header(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingDB":
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not an embedding database")
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        head = json.loads(data[12 : 12 + n])
        dt = record_dtype(head["width"], head["edge_width"], head["max_edges"])
        rows = np.frombuffer(data, dtype=dt, offset=12 + n)
        if rows.shape[0] != head["count"]:
            raise ValueError(f"{path}: expected {head['count']} records, found {rows.shape[0]}")
        recs = []
        for row in rows:
            ne = int(row["n_edges"])
            recs.append(Record(
                int(row["id"]), int(row["label"]), row["centroid"].astype(np.float64),
                float(row["var_mean"]), row["delta"].astype(np.float64),
                row["edges"][:ne].astype(np.float64), row["contributions"][:ne].astype(np.float64),
            ))
        return cls(recs)
