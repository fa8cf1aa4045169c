"""Reference forward pass of the shared query-attention relational encoder.

Images are given as feature matrices (the visual backbone is not part of this
package). Relational queries attend over all images' features concatenated
along the sequence axis; the result is added to the global queries, which then
attend over each image separately. Everything is float64 numpy.

Also hosts the two cross-image baselines that replace the relational path:
per-position mean pooling, and a hidden-axis concatenate/project/split mix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FeatureStack:
    features: np.ndarray  # (N_I, L_V, D_V)

    def __post_init__(self):
        f = _finite("features", self.features)
        if f.ndim != 3 or min(f.shape) < 1:
            raise ValueError(f"features must be (N_I, L_V, D_V) with positive sizes, got {f.shape}")
        object.__setattr__(self, "features", f)

    @classmethod
    def from_list(cls, mats) -> "FeatureStack":
        mats = [np.asarray(m, dtype=np.float64) for m in mats]
        if len({m.shape for m in mats}) != 1:
            raise ValueError("all image feature matrices must share (L_V, D_V)")
        return cls(np.stack(mats))

    @property
    def num_images(self) -> int:
        return self.features.shape[0]

    @property
    def seq_len(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class QueryBank:
    q0: np.ndarray  # (L_I, D_I) global queries
    c0: np.ndarray  # (L_I, D_I) relational queries
    instruction: np.ndarray | None = None  # (L_Q, D_I)

    def __post_init__(self):
        q0 = _finite("q0", self.q0)
        c0 = _finite("c0", self.c0)
        if q0.ndim != 2 or q0.shape != c0.shape:
            raise ValueError(f"q0 and c0 must be matrices of equal shape, got {q0.shape} and {c0.shape}")
        t = self.instruction
        if t is None:
            t = np.zeros((0, q0.shape[1]))
        t = _finite("instruction", t)
        if t.ndim != 2 or t.shape[1] != q0.shape[1]:
            raise ValueError(f"instruction tokens must be (L_Q, {q0.shape[1]}), got {t.shape}")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "instruction", t)

    @property
    def num_queries(self) -> int:
        return self.q0.shape[0]

    @property
    def dim(self) -> int:
        return self.q0.shape[1]


@dataclass(frozen=True)
class AttentionParams:
    """One multi-head cross-attention block; keys/values are mapped from D_V to D_I."""

    w_q: np.ndarray  # (D_I, D_I)
    w_k: np.ndarray  # (D_V, D_I)
    w_v: np.ndarray  # (D_V, D_I)
    w_o: np.ndarray  # (D_I, D_I)
    heads: int = 1

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        d_i = self.w_q.shape[1]
        if self.w_q.shape != (d_i, d_i) or self.w_o.shape != (d_i, d_i):
            raise ValueError("w_q and w_o must be square (D_I, D_I)")
        if self.w_k.shape[1] != d_i or self.w_v.shape != self.w_k.shape:
            raise ValueError("w_k and w_v must both be (D_V, D_I)")
        if self.heads < 1 or d_i % self.heads:
            raise ValueError(f"heads={self.heads} must divide D_I={d_i}")

    @property
    def query_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def kv_dim(self) -> int:
        return self.w_k.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, d_v: int, d_i: int, heads: int = 1) -> "AttentionParams":
        return cls(
            rng.standard_normal((d_i, d_i)) / np.sqrt(d_i),
            rng.standard_normal((d_v, d_i)) / np.sqrt(d_v),
            rng.standard_normal((d_v, d_i)) / np.sqrt(d_v),
            rng.standard_normal((d_i, d_i)) / np.sqrt(d_i),
            heads,
        )


@dataclass(frozen=True)
class LlmProjection:
    weight: np.ndarray  # (D_I, D)
    bias: np.ndarray  # (D,)

    def __post_init__(self):
        w = _finite("weight", self.weight)
        b = _finite("bias", self.bias)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError(f"projection needs weight (D_I, D) and bias (D,), got {w.shape}, {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_attention(
    queries: np.ndarray, keys_values: np.ndarray, params: AttentionParams, return_weights: bool = False
):
    """Scaled dot-product multi-head cross-attention.

    Returns the (M, D_I) output, and with ``return_weights`` also the
    (heads, M, N) row-stochastic attention weights.
    """
    queries = np.asarray(queries, dtype=np.float64)
    kv = np.asarray(keys_values, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != params.query_dim:
        raise ValueError(f"queries must be (M, {params.query_dim}), got {queries.shape}")
    if kv.ndim != 2 or kv.shape[1] != params.kv_dim or kv.shape[0] < 1:
        raise ValueError(f"keys/values must be (N>=1, {params.kv_dim}), got {kv.shape}")
    h = params.heads
    m, n = queries.shape[0], kv.shape[0]
    d_h = params.w_q.shape[1] // h
    q = (queries @ params.w_q).reshape(m, h, d_h).transpose(1, 0, 2)
    k = (kv @ params.w_k).reshape(n, h, d_h).transpose(1, 0, 2)
    v = (kv @ params.w_v).reshape(n, h, d_h).transpose(1, 0, 2)
    weights = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d_h))
    heads_out = weights @ v  # (h, M, d_h)
    out = heads_out.transpose(1, 0, 2).reshape(m, h * d_h) @ params.w_o
    if return_weights:
        return out, weights
    return out


def fuse_features(fs: FeatureStack) -> np.ndarray:
    """Concatenate image features along the sequence axis, image 1 first."""
    return fs.features.reshape(fs.num_images * fs.seq_len, fs.dim)


def relational_context(fs: FeatureStack, qb: QueryBank, params_c: AttentionParams) -> np.ndarray:
    return cross_attention(qb.c0, fuse_features(fs), params_c)


def global_attention(
    fs: FeatureStack, queries: np.ndarray, qb: QueryBank, params_q: AttentionParams, proj: LlmProjection
) -> np.ndarray:
    """Per-image query attention, keeping the first L_I outputs, then projection."""
    seq = np.concatenate([queries, qb.instruction], axis=0)
    n_q = queries.shape[0]
    out = np.stack([cross_attention(seq, fs.features[j], params_q)[:n_q] for j in range(fs.num_images)])
    return proj(out)


def square_forward(
    fs: FeatureStack,
    qb: QueryBank,
    params_c: AttentionParams,
    params_q: AttentionParams,
    proj: LlmProjection,
    return_context: bool = False,
):
    """Encode N_I images into an (N_I, L_I, D) stack of LLM-space tokens."""
    c = relational_context(fs, qb, params_c)
    out = global_attention(fs, c + qb.q0, qb, params_q, proj)
    if return_context:
        return out, c
    return out


def pooling_baseline(fs: FeatureStack) -> FeatureStack:
    mean = fs.features.mean(axis=0, keepdims=True)
    return FeatureStack(np.repeat(mean, fs.num_images, axis=0))


def projection_baseline(fs: FeatureStack, mix: np.ndarray) -> FeatureStack:
    """Concatenate images along the hidden axis, right-multiply by ``mix``, split back."""
    n, l, d = fs.features.shape
    mix = _finite("mix", mix)
    if mix.shape != (n * d, n * d):
        raise ValueError(f"mix must be ({n * d}, {n * d}) for {n} images of width {d}, got {mix.shape}")
    wide = fs.features.transpose(1, 0, 2).reshape(l, n * d)
    mixed = wide @ mix
    return FeatureStack(mixed.reshape(l, n, d).transpose(1, 0, 2))


def random_setup(
    rng: np.random.Generator, d_v: int, num_queries: int, d_i: int, d: int, heads: int = 1, instruction_len: int = 0
) -> tuple[QueryBank, AttentionParams, AttentionParams, LlmProjection]:
    """Randomly initialised queries, attention blocks and projection for demos and tests."""
    qb = QueryBank(
        rng.standard_normal((num_queries, d_i)),
        rng.standard_normal((num_queries, d_i)),
        rng.standard_normal((instruction_len, d_i)),
    )
    pc = AttentionParams.random(rng, d_v, d_i, heads)
    pq = AttentionParams.random(rng, d_v, d_i, heads)
    proj = LlmProjection(rng.standard_normal((d_i, d)) / np.sqrt(d_i), rng.standard_normal(d) * 0.1)
    return qb, pc, pq, proj
