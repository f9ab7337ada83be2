"""Constant-budget KV cache for decoding.

Stored entries form one temporally ordered sequence split into a past
segment and an observation window (the ``window`` most recent entries).
Queries are stored alongside keys/values because the importance score
that drives eviction needs the window's queries. Whenever the past
segment outgrows the budget, the lowest-importance past entries are
evicted immediately, so the cache never holds more than
``budget + window`` entries after an append returns.
"""

from __future__ import annotations

import io
import math

import numpy as np

from .errors import CompressionUndefinedError, EmptyInputError, ShapeError
from .tensor import DOUBLE, Matrix, Vector, softmax_rows


def importance_scores(Q_obs: Matrix, K_past: Matrix, d_k: int) -> Vector:
    """Per-past-entry importance: column sums of the softmax-normalized
    attention of the observation-window queries onto the past keys.

    Each query row contributes a probability distribution over past
    entries, so the scores sum to the number of observation queries.
    """
    K_past = np.asarray(K_past)
    Q_obs = np.asarray(Q_obs)
    if K_past.shape[0] == 0:
        return np.zeros(0, dtype=Q_obs.dtype)
    if Q_obs.shape[0] == 0:
        raise EmptyInputError("importance_scores needs observation queries")
    if Q_obs.shape[1] != K_past.shape[1]:
        raise ShapeError("query and key dims differ")
    probs = softmax_rows((Q_obs @ K_past.T) / math.sqrt(d_k))
    return probs.sum(axis=0)


class KvCache:
    """Single-stream decode cache with eager top-m retention.

    budget=None disables compression entirely (every entry is kept).
    """

    def __init__(self, d_k: int, d_v: int, budget: int | None, window: int, dtype=DOUBLE):
        if window < 1:
            raise ValueError("window must be >= 1")
        if budget is not None and budget < 1:
            raise ValueError("budget must be >= 1 (or None to disable)")
        self.d_k = d_k
        self.d_v = d_v
        self.budget = budget
        self.window = window
        self.dtype = dtype
        cap = 16
        self._queries = np.zeros((cap, d_k), dtype=dtype)
        self._keys = np.zeros((cap, d_k), dtype=dtype)
        self._values = np.zeros((cap, d_v), dtype=dtype)
        self._size = 0
        self.total_appended = 0
        self.peak_size = 0

    # -- sizes -----------------------------------------------------------

    @property
    def size(self) -> int:
        return self._size

    @property
    def n_obs(self) -> int:
        return min(self._size, self.window)

    @property
    def n_past(self) -> int:
        return self._size - self.n_obs

    # -- views and snapshots ---------------------------------------------

    def keys_view(self) -> Matrix:
        """All stored keys, temporal order. A view; do not mutate."""
        return self._keys[: self._size]

    def values_view(self) -> Matrix:
        return self._values[: self._size]

    @property
    def past_keys(self) -> Matrix:
        return self._keys[: self.n_past].copy()

    @property
    def past_values(self) -> Matrix:
        return self._values[: self.n_past].copy()

    @property
    def obs_queries(self) -> Matrix:
        return self._queries[self.n_past : self._size].copy()

    @property
    def obs_keys(self) -> Matrix:
        return self._keys[self.n_past : self._size].copy()

    @property
    def obs_values(self) -> Matrix:
        return self._values[self.n_past : self._size].copy()

    def split(self) -> tuple[tuple[Matrix, Matrix], tuple[Matrix, Matrix, Matrix]]:
        """(past keys/values, observation queries/keys/values) snapshots.

        Concatenating the two segments reproduces the stored sequence.
        """
        return (
            (self.past_keys, self.past_values),
            (self.obs_queries, self.obs_keys, self.obs_values),
        )

    # -- mutation --------------------------------------------------------

    def _grow_to(self, n: int):
        cap = self._keys.shape[0]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap)
        for name in ("_queries", "_keys", "_values"):
            old = getattr(self, name)
            grown = np.zeros((new_cap, old.shape[1]), dtype=self.dtype)
            grown[: self._size] = old[: self._size]
            setattr(self, name, grown)

    def append(self, q: Vector, k: Vector, v: Vector):
        """Admit one entry into the observation window, evicting as needed."""
        q = np.asarray(q, dtype=self.dtype)
        k = np.asarray(k, dtype=self.dtype)
        v = np.asarray(v, dtype=self.dtype)
        if q.shape != (self.d_k,) or k.shape != (self.d_k,):
            raise ShapeError(f"query/key must have dim {self.d_k}")
        if v.shape != (self.d_v,):
            raise ShapeError(f"value must have dim {self.d_v}")
        self._grow_to(self._size + 1)
        self._queries[self._size] = q
        self._keys[self._size] = k
        self._values[self._size] = v
        self._size += 1
        self.total_appended += 1
        if self.budget is not None and self.n_past > self.budget:
            self.compress()
        self.peak_size = max(self.peak_size, self._size)

    def compress(self):
        """Retain the ``budget`` most important past entries, original order.

        No-op when the past already fits. Ties in importance are broken
        toward the more recent entry.
        """
        n_past = self.n_past
        if self.budget is None or n_past <= self.budget:
            return
        n_obs = self.n_obs
        if n_obs == 0:
            raise CompressionUndefinedError(
                "past exceeds budget but the observation window is empty"
            )
        scores = importance_scores(
            self._queries[n_past : self._size],
            self._keys[:n_past],
            self.d_k,
        )
        # descending score, ties to the higher (more recent) index
        order = np.lexsort((-np.arange(n_past), -scores))
        retained = np.sort(order[: self.budget])
        kept = retained.size
        for name in ("_queries", "_keys", "_values"):
            buf = getattr(self, name)
            obs_rows = buf[n_past : self._size].copy()  # source may overlap dest
            buf[:kept] = buf[retained]
            buf[kept : kept + n_obs] = obs_rows
        self._size = kept + n_obs


def retained_indices(scores: Vector, budget: int) -> np.ndarray:
    """Top-``budget`` entry indices under descending score with recency
    tie-break, returned in original temporal order. Exposed for tests."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if n <= budget:
        return np.arange(n)
    order = np.lexsort((-np.arange(n), -scores))
    return np.sort(order[:budget])


# -- text round-trip -----------------------------------------------------


def dump_cache(cache: KvCache) -> str:
    """Serialize to text, exact in double precision via repr shortest form.

    Line 1: ``m, L_obs, n_past, n_obs`` header; line 2 carries the entry
    dimensions; then one line per past entry (key then value reals) and
    one per observation entry (query, key, then value reals).
    """
    out = io.StringIO()
    m = "inf" if cache.budget is None else str(cache.budget)
    out.write(f"{m}, {cache.window}, {cache.n_past}, {cache.n_obs}\n")
    out.write(f"{cache.d_k}, {cache.d_v}\n")

    def fmt(row):
        return " ".join(repr(float(x)) for x in row)

    n_past = cache.n_past
    for i in range(n_past):
        out.write(fmt(cache._keys[i]) + " " + fmt(cache._values[i]) + "\n")
    for i in range(n_past, cache.size):
        out.write(
            fmt(cache._queries[i])
            + " "
            + fmt(cache._keys[i])
            + " "
            + fmt(cache._values[i])
            + "\n"
        )
    return out.getvalue()


def load_cache(text: str) -> KvCache:
    """Inverse of :func:`dump_cache`. Past entries get zero queries (their
    queries were never needed once they left the window)."""
    lines = text.strip("\n").split("\n")
    if len(lines) < 2:
        raise ValueError("cache dump too short")
    m_s, window_s, n_past_s, n_obs_s = [s.strip() for s in lines[0].split(",")]
    d_k_s, d_v_s = [s.strip() for s in lines[1].split(",")]
    budget = None if m_s == "inf" else int(m_s)
    window, n_past, n_obs = int(window_s), int(n_past_s), int(n_obs_s)
    d_k, d_v = int(d_k_s), int(d_v_s)
    if len(lines) != 2 + n_past + n_obs:
        raise ValueError("cache dump row count disagrees with header")
    cache = KvCache(d_k=d_k, d_v=d_v, budget=budget, window=window)
    cache._grow_to(n_past + n_obs)
    for i in range(n_past):
        vals = [float(t) for t in lines[2 + i].split()]
        if len(vals) != d_k + d_v:
            raise ValueError(f"past row {i} has wrong arity")
        cache._keys[i] = vals[:d_k]
        cache._values[i] = vals[d_k:]
    for j in range(n_obs):
        i = n_past + j
        vals = [float(t) for t in lines[2 + i].split()]
        if len(vals) != 2 * d_k + d_v:
            raise ValueError(f"observation row {j} has wrong arity")
        cache._queries[i] = vals[:d_k]
        cache._keys[i] = vals[d_k : 2 * d_k]
        cache._values[i] = vals[2 * d_k :]
    cache._size = n_past + n_obs
    cache.total_appended = cache._size
    cache.peak_size = cache._size
    return cache
