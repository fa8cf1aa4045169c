"""Phrase embedding providers used by the semantic metrics.

Binary embedding file layout (little-endian)::

    b"EMB1" | u32 dim | u32 count | count x (u16 key_len | key utf-8 | dim x f32)
"""
from __future__ import annotations

import hashlib
import re
import struct
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

MAGIC = b"EMB1"
_WORD_RE = re.compile(r"[a-z0-9]+")


class EmbeddingProvider(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def cosine(provider: EmbeddingProvider, a: str, b: str) -> float:
    va, vb = provider.embed(a), provider.embed(b)
    if a == b:
        return 1.0
    return float(np.clip(np.dot(va, vb), -1.0, 1.0))


class HashEmbeddingProvider:
    """Deterministic token-averaging embeddings seeded from a hash of each token.

    Not comparable to any trained sentence encoder; intended for tests and
    for runs where no precomputed vectors are available.
    """

    name = "hash-fallback"

    def __init__(self, dimension: int = 64, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=str(self.seed).encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dimension)

    def embed(self, text: str) -> np.ndarray:
        tokens = _WORD_RE.findall(text.lower()) or [text]
        v = np.sum([self._token_vector(t) for t in tokens], axis=0)
        return v / np.linalg.norm(v)


class FileEmbeddingProvider:
    """Precomputed vectors looked up by exact phrase string."""

    name = "file"

    def __init__(self, vectors: Mapping[str, np.ndarray], dimension: int, source: str = ""):
        self.dimension = dimension
        self.source = source
        self._vectors = {}
        for key, v in vectors.items():
            v = np.asarray(v, dtype=np.float64)
            norm = np.linalg.norm(v)
            if v.shape != (dimension,) or norm == 0:
                raise ValueError(f"bad embedding for {key!r}")
            self._vectors[key] = v / norm

    @classmethod
    def load(cls, path: str | Path) -> "FileEmbeddingProvider":
        return cls(*read_embedding_file(path), source=str(path))

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise KeyError(f"no embedding for phrase {text!r}") from None


def write_embedding_file(path: str | Path, vectors: Mapping[str, np.ndarray], dimension: int) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", dimension, len(vectors)))
        for key, v in vectors.items():
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"key too long: {key[:40]!r}...")
            v = np.asarray(v, dtype="<f4")
            if v.shape != (dimension,):
                raise ValueError(f"vector for {key!r} has shape {v.shape}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(v.tobytes())


def read_embedding_file(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an EMB1 embedding file")
    dim, count = struct.unpack_from("<II", data, 4)
    off = 12
    vectors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            key = data[off : off + klen].decode("utf-8")
            off += klen
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            vectors[key] = vec
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated embedding file") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return vectors, dim
