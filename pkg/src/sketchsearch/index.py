"""Embedding store with exact nearest-neighbor ranking.

Three query modes over one immutable snapshot:
  - full: rank whole-screen embeddings by Euclidean distance;
  - segments: rank by the distance restricted to user-selected grid
    cells, each cell embedded independently, ignoring the rest of the
    screen entirely;
  - flow: rank consecutive same-length windows of multi-screen traces by
    the distance between order-preserving concatenations of their
    embeddings.

Search is exhaustive and exact; ties break toward the lexically smaller
id. Distances are accumulated in double precision so rankings are
reproducible bit-for-bit across save/load and across serving paths.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

INDEX_MAGIC = b"SWIDX1"
EMBEDDING_DIM = 64


class Hit(NamedTuple):
    item_id: str  # item id, or trace window id "trace@offset" for flow hits
    distance: float


@dataclass
class IndexedItem:
    item_id: str
    full: np.ndarray  # (64,)
    parts: np.ndarray | None = None  # (rows, cols, 64)
    trace_id: str | None = None
    trace_position: int | None = None


def _check_embedding(vec, what: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float32)
    if arr.shape != (EMBEDDING_DIM,):
        raise ValueError(f"{what} must have shape ({EMBEDDING_DIM},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


class Index:
    """Immutable snapshot of indexed items; safe for concurrent queries."""

    def __init__(self, items):
        items = sorted(items, key=lambda it: it.item_id)
        seen = set()
        grid = None
        for it in items:
            if it.item_id in seen:
                raise ValueError(f"duplicate item id {it.item_id!r}")
            seen.add(it.item_id)
            it.full = _check_embedding(it.full, f"embedding of {it.item_id!r}")
            if it.parts is not None:
                it.parts = np.asarray(it.parts, dtype=np.float32)
                if it.parts.ndim != 3 or it.parts.shape[2] != EMBEDDING_DIM:
                    raise ValueError(f"parts of {it.item_id!r} must be (rows, cols, {EMBEDDING_DIM})")
                if grid is None:
                    grid = it.parts.shape[:2]
                elif it.parts.shape[:2] != grid:
                    raise ValueError(
                        f"parts grid {it.parts.shape[:2]} of {it.item_id!r} differs from {grid}"
                    )
            if (it.trace_id is None) != (it.trace_position is None):
                raise ValueError(f"item {it.item_id!r} needs both trace id and position")
        if items and any(it.parts is not None for it in items):
            if any(it.parts is None for it in items):
                raise ValueError("either every item carries part embeddings or none does")
        self._items = items
        self._grid = grid
        self._full = (
            np.stack([it.full for it in items]).astype(np.float64)
            if items
            else np.zeros((0, EMBEDDING_DIM))
        )
        self._ids = [it.item_id for it in items]
        self._traces = {}
        for it in items:
            if it.trace_id is not None:
                self._traces.setdefault(it.trace_id, []).append(it)
        for trace_id, members in self._traces.items():
            members.sort(key=lambda it: it.trace_position)
            positions = [m.trace_position for m in members]
            if len(set(positions)) != len(positions):
                raise ValueError(f"trace {trace_id!r} has duplicate positions")

    def __len__(self):
        return len(self._items)

    @property
    def grid(self) -> tuple | None:
        return self._grid

    @property
    def item_ids(self) -> list[str]:
        return list(self._ids)

    @property
    def trace_ids(self) -> list[str]:
        return sorted(self._traces)

    def item(self, item_id: str) -> IndexedItem:
        for it in self._items:
            if it.item_id == item_id:
                return it
        raise KeyError(item_id)

    def add(self, item: IndexedItem) -> "Index":
        """Return a new snapshot extended with one item."""
        if item.item_id in set(self._ids):
            raise ValueError(f"duplicate item id {item.item_id!r}")
        return Index(self._items + [item])

    # -- queries ------------------------------------------------------------

    def _require_nonempty(self):
        if not self._items:
            raise ValueError("query against an empty index")

    def query_full(self, q, k: int) -> list[Hit]:
        """Exact nearest neighbors of a whole-screen embedding."""
        self._require_nonempty()
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _check_embedding(q, "query embedding").astype(np.float64)
        dists = np.sqrt(np.sum((self._full - q) ** 2, axis=1))
        ranked = sorted(zip(self._ids, dists), key=lambda p: (p[1], p[0]))
        return [Hit(i, float(d)) for i, d in ranked[:k]]

    def query_segments(self, cells, k: int) -> list[Hit]:
        """Rank by distance over the selected grid cells only.

        ``cells`` is a list of (row, col, embedding); the unselected
        cells never contribute, so matches are agnostic to them.
        """
        self._require_nonempty()
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._grid is None:
            raise ValueError("index was built without part embeddings")
        if not cells:
            raise ValueError("segments query needs at least one active cell")
        rows, cols = self._grid
        active = []
        for row, col, emb in cells:
            if not (0 <= row < rows and 0 <= col < cols):
                raise ValueError(f"cell ({row}, {col}) outside {rows}x{cols} grid")
            active.append((row, col, _check_embedding(emb, f"cell ({row}, {col})").astype(np.float64)))
        d2 = np.zeros(len(self._items))
        for row, col, emb in active:
            cell_matrix = np.stack([it.parts[row, col] for it in self._items]).astype(np.float64)
            d2 += np.sum((cell_matrix - emb) ** 2, axis=1)
        ranked = sorted(zip(self._ids, np.sqrt(d2)), key=lambda p: (p[1], p[0]))
        return [Hit(i, float(d)) for i, d in ranked[:k]]

    def query_flow(self, seq, k: int) -> list[Hit]:
        """Rank consecutive trace windows against an ordered embedding sequence.

        Window ids are "trace@offset" with offset counted in window start
        position within the position-sorted trace.
        """
        self._require_nonempty()
        if k < 1:
            raise ValueError("k must be >= 1")
        seq = [_check_embedding(e, f"flow step {i}").astype(np.float64) for i, e in enumerate(seq)]
        if len(seq) < 2:
            raise ValueError("flow query needs at least 2 screens")
        length = len(seq)
        candidates = []
        for trace_id in sorted(self._traces):
            members = self._traces[trace_id]
            for off in range(len(members) - length + 1):
                d2 = 0.0
                for t in range(length):
                    diff = members[off + t].full.astype(np.float64) - seq[t]
                    d2 += float(np.dot(diff, diff))
                candidates.append((f"{trace_id}@{off}", np.sqrt(d2)))
        if not candidates:
            raise ValueError(f"no trace holds a window of {length} screens")
        candidates.sort(key=lambda p: (p[1], p[0]))
        return [Hit(i, float(d)) for i, d in candidates[:k]]

    def trace_window_items(self, window_id: str, length: int) -> list[str]:
        """Resolve a flow window id back to its member item ids."""
        trace_id, _, off_str = window_id.rpartition("@")
        members = self._traces.get(trace_id)
        if members is None:
            raise KeyError(window_id)
        off = int(off_str)
        if off < 0 or off + length > len(members):
            raise KeyError(window_id)
        return [m.item_id for m in members[off : off + length]]

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        rows, cols = self._grid if self._grid is not None else (0, 0)
        out = [INDEX_MAGIC, struct.pack("<IIII", EMBEDDING_DIM, rows, cols, len(self._items))]
        for it in self._items:
            idb = it.item_id.encode()
            flags = (1 if it.parts is not None else 0) | (2 if it.trace_id is not None else 0)
            out.append(struct.pack("<H", len(idb)))
            out.append(idb)
            out.append(struct.pack("<B", flags))
            out.append(it.full.astype("<f4").tobytes())
            if it.parts is not None:
                out.append(it.parts.astype("<f4").tobytes())
            if it.trace_id is not None:
                tb = it.trace_id.encode()
                out.append(struct.pack("<H", len(tb)))
                out.append(tb)
                out.append(struct.pack("<I", it.trace_position))
        body = b"".join(out)
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def build(items) -> Index:
    return Index(list(items))


def load(path) -> Index:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:6] != INDEX_MAGIC:
        raise ValueError(f"not an index file: {path}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError(f"index file checksum mismatch: {path}")
    pos = 6
    dim, rows, cols, n_items = struct.unpack("<IIII", body[pos : pos + 16])
    pos += 16
    if dim != EMBEDDING_DIM:
        raise ValueError(f"unsupported embedding dim {dim}")
    items = []
    for _ in range(n_items):
        (idlen,) = struct.unpack("<H", body[pos : pos + 2])
        pos += 2
        item_id = body[pos : pos + idlen].decode()
        pos += idlen
        flags = body[pos]
        pos += 1
        full = np.frombuffer(body[pos : pos + 4 * dim], dtype="<f4").copy()
        pos += 4 * dim
        parts = None
        if flags & 1:
            count = rows * cols * dim
            parts = np.frombuffer(body[pos : pos + 4 * count], dtype="<f4").reshape(rows, cols, dim).copy()
            pos += 4 * count
        trace_id = trace_position = None
        if flags & 2:
            (tlen,) = struct.unpack("<H", body[pos : pos + 2])
            pos += 2
            trace_id = body[pos : pos + tlen].decode()
            pos += tlen
            (trace_position,) = struct.unpack("<I", body[pos : pos + 4])
            pos += 4
        items.append(
            IndexedItem(item_id=item_id, full=full, parts=parts, trace_id=trace_id, trace_position=trace_position)
        )
    if pos != len(body):
        raise ValueError("index file has trailing bytes")
    return Index(items)
