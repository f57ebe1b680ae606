"""Frozen contextual item embeddings.

Maps item text to a fixed d-dimensional unit vector via hashed character
trigrams plus a seeded random projection. The table stands in for vectors a
pretrained language model would produce offline; it is computed once and
never updated by any training step (the checksum makes that auditable).
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .datasets import Item

TRIGRAM_BUCKETS = 4096


class EmbeddingError(ValueError):
    pass


def checksum_of(vectors: np.ndarray) -> str:
    arr = np.ascontiguousarray(vectors, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class EmbeddingTable:
    dim: int
    vectors: np.ndarray  # (|V|, dim), rows unit L2 norm
    provider_tag: str
    checksum: str

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, provider_tag: str) -> "EmbeddingTable":
        vectors = np.asarray(vectors, dtype=np.float64)
        return cls(dim=vectors.shape[1], vectors=vectors, provider_tag=provider_tag,
                   checksum=checksum_of(vectors))

    def verify_frozen(self) -> bool:
        """True iff the stored values still match the recorded checksum."""
        return checksum_of(self.vectors) == self.checksum


def _trigram_counts(text: str) -> dict[int, int]:
    counts: dict[int, int] = {}
    grams = [text[i:i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else [text]
    for g in grams:
        b = zlib.crc32(g.encode("utf-8")) % TRIGRAM_BUCKETS
        counts[b] = counts.get(b, 0) + 1
    return counts


def embed_items(items: list[Item], dim: int, seed: int) -> EmbeddingTable:
    """Embed every item's text; identical texts map to identical rows.

    Empty-text items fall back to a seeded per-id random unit vector so the
    table never contains degenerate rows.
    """
    if dim < 2:
        raise EmbeddingError("embedding dim must be >= 2")
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((TRIGRAM_BUCKETS, dim))

    rows, cols, data = [], [], []
    empty = []
    for idx, item in enumerate(items):
        if not item.text:
            empty.append(idx)
            continue
        for bucket, count in _trigram_counts(item.text).items():
            rows.append(idx)
            cols.append(bucket)
            data.append(float(count))
    bags = sparse.csr_matrix((data, (rows, cols)), shape=(len(items), TRIGRAM_BUCKETS))
    vectors = np.asarray(bags @ projection, dtype=np.float64)

    for idx in empty:
        sub = np.random.default_rng([seed, 0x5EED, items[idx].id])
        vectors[idx] = sub.standard_normal(dim)

    norms = np.linalg.norm(vectors, axis=1)
    for idx in np.where(norms < 1e-12)[0]:
        sub = np.random.default_rng([seed, 0x5EED, items[int(idx)].id])
        vectors[idx] = sub.standard_normal(dim)
    norms = np.linalg.norm(vectors, axis=1)
    vectors /= norms[:, None]

    return EmbeddingTable.from_vectors(vectors, provider_tag=f"trigram-proj-{seed}")


def load_embeddings(path, expected_num_items: int) -> EmbeddingTable:
    """Load a CSV of per-item vectors (one row per item, in id order)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError:
                raise EmbeddingError(f"{path}:{line_num}: non-numeric field") from None
    if len(rows) != expected_num_items:
        raise EmbeddingError(
            f"{path}: expected {expected_num_items} rows, found {len(rows)}")
    dim = len(rows[0])
    if any(len(r) != dim for r in rows):
        raise EmbeddingError(f"{path}: inconsistent row widths")
    vectors = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms < 1e-12):
        raise EmbeddingError(f"{path}: zero-norm row cannot be normalized")
    vectors /= norms[:, None]
    return EmbeddingTable.from_vectors(vectors, provider_tag=f"file:{Path(path).name}")
