"""Fixed-capacity FIFO queue of cached embedding triples with
video-similarity nearest-neighbor retrieval.

Entries always carry an IMU and a video vector; the text vector may be
absent. Capacities stay small enough that retrieval is an exact exhaustive
scan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolationError, EmptyQueueError, ShapeError
from .seeding import make_rng

_NORM_TOL = 1e-6


def _check_unit(vec: np.ndarray, name: str) -> None:
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > _NORM_TOL:
        raise ContractViolationError(f"{name} has norm {norm:.8f}; expected unit norm")


@dataclass
class QueueEntry:
    """One cached (IMU, video, optional text) embedding triple."""

    z_m: np.ndarray
    z_v: np.ndarray
    z_t: np.ndarray | None
    insert_step: int


@dataclass
class QueueStats:
    size: int
    oldest_step: int | None
    newest_step: int | None
    mean_pairwise_video_similarity: float | None


class FeatureQueue:
    """Ring buffer of QueueEntry with strictly FIFO eviction."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ShapeError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._z_m = np.zeros((capacity, dim))
        self._z_v = np.zeros((capacity, dim))
        self._z_t = np.zeros((capacity, dim))
        self._has_text = np.zeros(capacity, dtype=bool)
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def size(self) -> int:
        return self._size

    def _logical_order(self) -> np.ndarray:
        """Physical indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._cursor) % self.capacity

    def entries(self) -> list[QueueEntry]:
        """Contents oldest-first (deterministic iteration order)."""
        out = []
        for i in self._logical_order():
            out.append(QueueEntry(
                z_m=self._z_m[i].copy(),
                z_v=self._z_v[i].copy(),
                z_t=self._z_t[i].copy() if self._has_text[i] else None,
                insert_step=int(self._steps[i]),
            ))
        return out

    def push_batch(self, entries: Sequence[QueueEntry]) -> None:
        """Append in order, evicting the oldest beyond capacity."""
        for e in entries:
            if e.z_m.shape != (self.dim,) or e.z_v.shape != (self.dim,):
                raise ShapeError(
                    f"queue entry vectors must be [{self.dim}], got "
                    f"{e.z_m.shape}/{e.z_v.shape}"
                )
            _check_unit(e.z_m, "z_m")
            _check_unit(e.z_v, "z_v")
            if e.z_t is not None:
                _check_unit(e.z_t, "z_t")
            i = self._cursor
            self._z_m[i] = e.z_m
            self._z_v[i] = e.z_v
            if e.z_t is not None:
                self._z_t[i] = e.z_t
                self._has_text[i] = True
            else:
                self._z_t[i] = 0.0
                self._has_text[i] = False
            self._steps[i] = e.insert_step
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _snapshot_views(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        order = self._logical_order()
        return (self._z_m[order].copy(), self._z_v[order].copy(),
                self._z_t[order].copy(), self._has_text[order].copy())

    def nearest_by_video(self, query_video_emb: np.ndarray) -> tuple[int, float]:
        """Index (oldest-first numbering) and similarity of the entry whose
        video vector is most similar to the query; ties go to the smallest
        index."""
        if self._size == 0:
            raise EmptyQueueError("nearest_by_video on an empty queue")
        _check_unit(query_video_emb, "query")
        sims = self._z_v[self._logical_order()] @ query_video_emb
        best = int(np.argmax(sims))
        return best, float(sims[best])

    def batch_retrieve(self, queries: np.ndarray) -> list[tuple[int, float]]:
        """nearest_by_video for every row of [n, d]; all queries see the same
        snapshot of the queue."""
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise ShapeError(f"queries must be [n, {self.dim}], got {queries.shape}")
        if queries.shape[0] == 0:
            return []
        if self._size == 0:
            raise EmptyQueueError("batch_retrieve on an empty queue")
        for row in queries:
            _check_unit(row, "query")
        # One snapshot, then per-row scans with the exact arithmetic of
        # nearest_by_video so the composition contract holds bit-for-bit.
        z_v = self._z_v[self._logical_order()]
        out = []
        for row in queries:
            sims = z_v @ row
            best = int(np.argmax(sims))
            out.append((best, float(sims[best])))
        return out

    def gather(self, indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (z_m, z_v, z_t, has_text) rows for oldest-first indices."""
        idx = np.fromiter(indices, dtype=np.intp)
        order = self._logical_order()[idx]
        return (self._z_m[order].copy(), self._z_v[order].copy(),
                self._z_t[order].copy(), self._has_text[order].copy())

    def snapshot_stats(self, sample_pairs: int = 2048, seed: int = 0) -> QueueStats:
        """Size, step range, and (sampled) mean pairwise video similarity."""
        if self._size == 0:
            return QueueStats(0, None, None, None)
        order = self._logical_order()
        steps = self._steps[order]
        z_v = self._z_v[order]
        n = self._size
        total_pairs = n * (n - 1) // 2
        if total_pairs == 0:
            mean_sim = None
        elif total_pairs <= sample_pairs:
            sims = z_v @ z_v.T
            mean_sim = float((sims.sum() - n) / (2 * total_pairs))
        else:
            rng = make_rng(seed, "queue-stats")
            i = rng.integers(0, n, size=sample_pairs)
            j = rng.integers(0, n - 1, size=sample_pairs)
            j = np.where(j >= i, j + 1, j)  # distinct pair without rejection
            mean_sim = float(np.einsum("ij,ij->i", z_v[i], z_v[j]).mean())
        return QueueStats(
            size=n,
            oldest_step=int(steps.min()),
            newest_step=int(steps.max()),
            mean_pairwise_video_similarity=mean_sim,
        )
