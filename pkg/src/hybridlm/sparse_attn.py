"""Top-k chunk sparse attention with causal prefill and budgeted decode.

Keys are partitioned into fixed-size chunks; a query scores each chunk by
its inner product with the chunk's mean-pooled keys, keeps the k best, and
runs ordinary scaled-dot-product attention over the kept tokens only. A
query always attends the causal prefix of its own chunk, and chunk
selection ranges over fully completed earlier chunks, so position 0 is
never left without context. Selection is hard routing: gradients flow
through the attention arithmetic but not through the top-k choice.

The decode path applies the same rule to the entries stored in a
:class:`~hybridlm.kv_cache.KvCache`, re-chunked contiguously, which makes
step-by-step decoding reproduce the prefill outputs exactly when cache
compression is off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .tensor import Matrix, Vector, mean_pool, pairwise_sum_mid, softmax_vec


@dataclass(frozen=True)
class AttnConfig:
    """Sparse-attention geometry and cache budget.

    chunk_size: tokens per selection chunk
    top_k: chunks kept per query
    d_k / d_v: key/query and value dimensions
    budget: max retained past cache entries while decoding (None = unlimited)
    window: observation-window length, the always-kept most recent entries
    """

    chunk_size: int = 64
    top_k: int = 4
    d_k: int = 64
    d_v: int = 64
    budget: int | None = 1024
    window: int = 64

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.d_k < 1:
            raise ConfigError("d_k must be >= 1")
        if self.d_v < 1:
            raise ConfigError("d_v must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.budget is not None and self.budget < self.chunk_size:
            raise ConfigError("budget must be >= chunk_size")


@dataclass
class ChunkScores:
    """Relevance score per candidate chunk, aligned with ``candidate_ids``."""

    scores: Vector
    candidate_ids: np.ndarray

    def __post_init__(self):
        if len(self.scores) != len(self.candidate_ids):
            raise ShapeError("scores and candidate_ids must align")


@dataclass
class AttnTrace:
    """Optional per-position instrumentation of selection decisions."""

    records: list[tuple[int, tuple[int, ...], np.ndarray]] = field(
        default_factory=list
    )

    def record(self, position: int, selected: np.ndarray, attended: np.ndarray):
        self.records.append(
            (position, tuple(int(c) for c in selected), np.asarray(attended))
        )

    def lines(self) -> list[str]:
        """Serialize as ``position, [chunk_ids], attended_count`` lines."""
        return [
            f"{pos}, {list(sel)}, {att.size}" for pos, sel, att in self.records
        ]


def chunk_key_means(K: Matrix, chunk_size: int) -> Matrix:
    """Mean-pooled keys per chunk, temporal order, trailing chunk over its
    actual length. Uses the shared pairwise fold so every caller sees
    bitwise-identical means for identical rows."""
    K = np.asarray(K)
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, K.shape[1]), dtype=K.dtype)
    n_full = n // chunk_size
    parts = []
    if n_full:
        stack = K[: n_full * chunk_size].reshape(n_full, chunk_size, K.shape[1])
        parts.append(pairwise_sum_mid(stack) / chunk_size)
    tail = n - n_full * chunk_size
    if tail:
        parts.append(mean_pool(K[n_full * chunk_size :])[None, :])
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)


def chunk_scores(q: Vector, K: Matrix, chunk_size: int) -> ChunkScores:
    """Score every chunk of K against q: score_i = q . mean(chunk_i keys)."""
    q = np.asarray(q)
    K = np.asarray(K)
    if K.shape[0] == 0:
        return ChunkScores(
            scores=np.zeros(0, dtype=q.dtype), candidate_ids=np.zeros(0, dtype=int)
        )
    if q.shape[0] != K.shape[1]:
        raise ShapeError(f"query dim {q.shape[0]} vs key dim {K.shape[1]}")
    means = chunk_key_means(K, chunk_size)
    return ChunkScores(scores=means @ q, candidate_ids=np.arange(means.shape[0]))


def select_topk(scores: ChunkScores, k: int) -> np.ndarray:
    """Indices of the k best-scoring chunks, ties to the lower chunk id.

    Returns all candidates when fewer than k exist; result is sorted
    ascending so gathered tokens stay in temporal order.
    """
    if k < 1:
        raise ConfigError("top_k must be >= 1")
    n = len(scores.candidate_ids)
    if n == 0:
        return np.zeros(0, dtype=int)
    # stable sort on negated scores keeps the lower id first among ties
    order = np.argsort(-np.asarray(scores.scores), kind="stable")
    chosen = np.asarray(scores.candidate_ids)[order[: min(k, n)]]
    return np.sort(chosen)


def attention_weights(q: Vector, K_sel: Matrix, d_k: int) -> Vector:
    """Softmax weights of q over the selected keys."""
    K_sel = np.asarray(K_sel)
    if K_sel.shape[0] == 0:
        raise EmptyInputError("attention over an empty selection")
    if np.asarray(q).shape[0] != K_sel.shape[1]:
        raise ShapeError("query/key dimension mismatch")
    return softmax_vec((K_sel @ q) / math.sqrt(d_k))


def sparse_attend(q: Vector, K_sel: Matrix, V_sel: Matrix, d_k: int) -> Vector:
    """Scaled-dot-product attention of one query over selected pairs."""
    K_sel = np.asarray(K_sel)
    V_sel = np.asarray(V_sel)
    if K_sel.shape[0] != V_sel.shape[0]:
        raise ShapeError("selected keys and values must align")
    return attention_weights(q, K_sel, d_k) @ V_sel


def sparse_attend_backward(
    q: Vector, K_sel: Matrix, V_sel: Matrix, d_k: int, upstream: Vector
) -> tuple[Vector, Matrix, Matrix]:
    """Exact gradients of sparse_attend w.r.t. q, K_sel, V_sel.

    Selection is fixed upstream (hard routing), so only the attention
    arithmetic is differentiated.
    """
    q = np.asarray(q)
    K_sel = np.asarray(K_sel)
    V_sel = np.asarray(V_sel)
    upstream = np.asarray(upstream)
    if K_sel.shape[0] != V_sel.shape[0]:
        raise ShapeError("selected keys and values must align")
    if upstream.shape[0] != V_sel.shape[1]:
        raise ShapeError("upstream gradient dim must match value dim")
    scale = 1.0 / math.sqrt(d_k)
    p = attention_weights(q, K_sel, d_k)
    dp = V_sel @ upstream
    dz = p * (dp - float(p @ dp))
    dq = (K_sel.T @ dz) * scale
    dK = np.outer(dz, q) * scale
    dV = np.outer(p, upstream)
    return dq, dK, dV


def _gather_indices(
    selected: np.ndarray, chunk_size: int, own_start: int, position: int
) -> np.ndarray:
    parts = [
        np.arange(c * chunk_size, (c + 1) * chunk_size) for c in selected
    ]
    parts.append(np.arange(own_start, position + 1))
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def _attend_position(
    q: Vector,
    K: Matrix,
    V: Matrix,
    means: Matrix,
    position: int,
    cfg: AttnConfig,
    trace: AttnTrace | None,
) -> Vector:
    """Shared selection + attention rule for one query position.

    ``means`` must cover at least the chunks preceding the position's own
    chunk; both prefill and decode pass means computed by
    :func:`chunk_key_means` so their choices agree bitwise.
    """
    chunk = position // cfg.chunk_size
    own_start = chunk * cfg.chunk_size
    if chunk > 0:
        cand = ChunkScores(
            scores=means[:chunk] @ q, candidate_ids=np.arange(chunk)
        )
        selected = select_topk(cand, cfg.top_k)
    else:
        selected = np.zeros(0, dtype=int)
    idx = _gather_indices(selected, cfg.chunk_size, own_start, position)
    if trace is not None:
        trace.record(position, selected, idx)
    return sparse_attend(q, K[idx], V[idx], cfg.d_k)


def prefill(
    Q: Matrix, K: Matrix, V: Matrix, cfg: AttnConfig, trace: AttnTrace | None = None
) -> Matrix:
    """Causal sparse self-attention over a whole sequence.

    Position t selects among chunks wholly before its own chunk and always
    attends its own chunk's prefix, so no attended index ever exceeds t.
    """
    Q = np.asarray(Q)
    K = np.asarray(K)
    V = np.asarray(V)
    n = Q.shape[0]
    if not (K.shape[0] == n and V.shape[0] == n):
        raise ShapeError("prefill expects equal-length Q, K, V")
    out = np.zeros((n, V.shape[1] if V.ndim == 2 else 0), dtype=Q.dtype)
    if n == 0:
        return out
    means = chunk_key_means(K, cfg.chunk_size)
    for t in range(n):
        out[t] = _attend_position(Q[t], K, V, means, t, cfg, trace)
    return out


def decode_step(q: Vector, cache, cfg: AttnConfig, trace: AttnTrace | None = None) -> Vector:
    """Attend one decode query against the stored cache entries.

    Stored entries (compressed past + observation window) are re-chunked
    contiguously; the trailing partial chunk is always attended and the k
    best completed chunks join it, bounding the attended set by
    top_k * chunk_size + chunk_size entries. Over an uncompressed cache
    this reproduces the prefill rule at the final position exactly.
    """
    keys = cache.keys_view()
    values = cache.values_view()
    n = keys.shape[0]
    if n == 0:
        raise EmptyInputError("decode_step over an empty cache")
    n_complete = (n - 1) // cfg.chunk_size  # chunks before the current one
    means = chunk_key_means(keys[: n_complete * cfg.chunk_size], cfg.chunk_size)
    return _attend_position(np.asarray(q), keys, values, means, n - 1, cfg, trace)


def full_attention(
    Q: Matrix,
    K: Matrix,
    V: Matrix,
    d_k: int,
    causal: bool = False,
    row_block: int = 512,
) -> Matrix:
    """Dense reference attention, O(N^2), blocked over query rows so the
    score matrix never fully materializes."""
    Q = np.asarray(Q)
    K = np.asarray(K)
    V = np.asarray(V)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("full_attention expects 2-D Q, K, V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeError("full_attention shape mismatch")
    if causal and Q.shape[0] != K.shape[0]:
        raise ShapeError("causal attention needs equal query/key counts")
    n = Q.shape[0]
    out = np.empty((n, V.shape[1]), dtype=Q.dtype)
    scale = 1.0 / math.sqrt(d_k)
    for start in range(0, n, row_block):
        stop = min(start + row_block, n)
        # causal rows in this block see no key at index >= stop, so skip
        # those columns entirely instead of masking them
        visible = stop if causal else K.shape[0]
        logits = (Q[start:stop] @ K[:visible].T) * scale
        if causal:
            rows = np.arange(start, stop)
            cols = np.arange(start, stop)
            block = logits[:, start:stop]
            block[cols[None, :] > rows[:, None]] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[start:stop] = logits @ V[:visible]
    return out
