"""Desk-scale benchmark harness.

Measures prefill and decode latency against context length, fits
log-log scaling exponents, compares the sparse kernel against the dense
causal reference, and generates passkey retrieval tasks for protocol
checks. Timings use a monotonic clock with one warmup run and a median
over repeats; allocation peaks come from a tracemalloc probe around the
warmup so the timed runs stay unperturbed. Cache entry counts are the
machine-independent memory figure, bytes are informational.
"""

from __future__ import annotations

import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, InputError, InsufficientDataError
from .kv_cache import KvCache
from .model import HybridModel, StackState
from .sparse_attn import AttnConfig, full_attention, prefill, decode_step
from .tensor import DOUBLE, SINGLE

_FILLER_ALPHABET = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz ", dtype=np.uint8)

NEEDLE_LENGTH = 14  # "<Kdddd>" plus "<Vdddd>"


def _needle_text(rng) -> tuple[str, str]:
    key = f"<K{int(rng.integers(10000)):04d}>"
    value = f"<V{int(rng.integers(10000)):04d}>"
    return key, value


def count_occurrences(haystack: np.ndarray, needle: np.ndarray) -> int:
    """How many times the needle appears as a contiguous subsequence."""
    n, length = int(haystack.size), int(needle.size)
    if length == 0 or length > n:
        return 0
    windows = np.lib.stride_tricks.sliding_window_view(haystack, length)
    return int(np.all(windows == needle, axis=1).sum())


@dataclass
class PasskeyTask:
    """A needle-in-a-haystack retrieval instance over byte tokens."""

    context: np.ndarray
    needle_position: int
    key_tokens: np.ndarray
    value_tokens: np.ndarray
    answer: np.ndarray

    def __post_init__(self):
        needle = np.concatenate([self.key_tokens, self.value_tokens])
        end = self.needle_position + needle.size
        if self.needle_position < 0 or end > self.context.size:
            raise InputError("needle does not fit inside the context")
        if not np.array_equal(self.context[self.needle_position : end], needle):
            raise InputError("context does not contain the needle at its position")
        if count_occurrences(self.context, needle) != 1:
            raise InputError("needle must occur exactly once in the context")


def gen_passkey_task(context_len: int, needle_position: int, seed: int) -> PasskeyTask:
    """Deterministic passkey task: letter filler, digit-bracket needle.

    The filler alphabet (lowercase letters and space) is disjoint from
    the needle alphabet (angle brackets, uppercase, digits), so the
    inserted key/value pair is structurally the only occurrence.
    """
    rng = np.random.default_rng(seed)
    key, value = _needle_text(rng)
    key_tokens = np.frombuffer(key.encode("ascii"), dtype=np.uint8).astype(np.int64)
    value_tokens = np.frombuffer(value.encode("ascii"), dtype=np.uint8).astype(np.int64)
    needle_len = key_tokens.size + value_tokens.size
    if context_len < needle_len + 2:
        raise InputError(
            f"context_len must be at least {needle_len + 2}, got {context_len}"
        )
    if not 0 <= needle_position <= context_len - needle_len:
        raise InputError(
            f"needle_position must lie in [0, {context_len - needle_len}]"
        )
    filler_ids = rng.integers(0, _FILLER_ALPHABET.size, size=context_len)
    context = _FILLER_ALPHABET[filler_ids].astype(np.int64)
    context[needle_position : needle_position + key_tokens.size] = key_tokens
    context[
        needle_position + key_tokens.size : needle_position + needle_len
    ] = value_tokens
    return PasskeyTask(
        context=context,
        needle_position=needle_position,
        key_tokens=key_tokens,
        value_tokens=value_tokens,
        answer=value_tokens.copy(),
    )


@dataclass
class LatencyRecord:
    """One measured point: a phase at a context length.

    wall_time is seconds for the whole prefill, or the median single
    step for decode. peak_entries counts stored cache rows at the high
    water mark; peak_bytes is the tracemalloc probe.
    """

    phase: str
    context_len: int
    wall_time: float
    peak_entries: int
    peak_bytes: int

    def __post_init__(self):
        if self.context_len < 1:
            raise InputError("context_len must be >= 1")
        if not self.wall_time > 0:
            raise InputError("wall_time must be positive")
        if self.peak_entries < 0 or self.peak_bytes < 0:
            raise InputError("peak counters cannot be negative")


def _check_lengths(lengths):
    if len(lengths) == 0:
        raise EmptyInputError("need at least one length")
    for a, b in zip(lengths, lengths[1:]):
        if b <= a:
            raise InputError("lengths must be strictly ascending")


def _random_tokens(cfg, n: int) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, n))
    return rng.integers(0, cfg.vocab_size, size=n)


def _peak_entries(state: StackState) -> int:
    peaks = [s.peak_size for s in state.layers if isinstance(s, KvCache)]
    return max(peaks, default=0)


def measure_prefill(model: HybridModel, lengths, repeats: int = 3) -> list:
    """Median prefill wall time per length, warmup first, ascending order."""
    _check_lengths(lengths)
    if repeats < 3:
        raise InputError("repeats must be >= 3")
    records = []
    for n in lengths:
        tokens = _random_tokens(model.cfg, n)
        tracemalloc.start()
        _, state = model.forward(tokens, mode="prefill")
        peak_bytes = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            model.forward(tokens, mode="prefill")
            times.append(time.perf_counter() - start)
        records.append(
            LatencyRecord(
                phase="prefill",
                context_len=n,
                wall_time=statistics.median(times),
                peak_entries=_peak_entries(state),
                peak_bytes=peak_bytes,
            )
        )
    return records


def measure_decode(model: HybridModel, context_lens, steps: int = 64) -> list:
    """Per-step decode latency after prefilling each context length."""
    _check_lengths(context_lens)
    if steps < 16:
        raise InputError("steps must be >= 16")
    records = []
    for n in context_lens:
        tokens = _random_tokens(model.cfg, n)
        logits, state = model.forward(tokens, mode="prefill")
        tok = int(np.argmax(logits[-1]))
        tracemalloc.start()
        for _ in range(8):
            logits, state = model.forward([tok], mode="decode", state=state)
            tok = int(np.argmax(logits[-1]))
        peak_bytes = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        per_step = []
        for _ in range(steps):
            start = time.perf_counter()
            logits, state = model.forward([tok], mode="decode", state=state)
            per_step.append(time.perf_counter() - start)
            tok = int(np.argmax(logits[-1]))
        records.append(
            LatencyRecord(
                phase="decode",
                context_len=n,
                wall_time=statistics.median(per_step),
                peak_entries=_peak_entries(state),
                peak_bytes=peak_bytes,
            )
        )
    return records


def fit_scaling(records) -> float:
    """Least-squares slope of log(time) against log(length)."""
    if len(records) < 3:
        raise InsufficientDataError("need at least 3 records to fit an exponent")
    lens = [r.context_len for r in records]
    if len(set(lens)) < 3:
        raise InsufficientDataError("need at least 3 distinct lengths")
    x = np.log(np.asarray(lens, dtype=np.float64))
    y = np.log(np.asarray([r.wall_time for r in records], dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


@dataclass
class ComparisonTable:
    """Sparse-vs-dense rows plus fitted exponents and a correctness probe.

    saturated_max_err compares the two paths where top-k covers every
    chunk, so they compute the same attention and must agree.
    """

    records: list = field(default_factory=list)
    exponents: dict = field(default_factory=dict)
    saturated_max_err: float = 0.0


def _timed(fn, repeats: int) -> tuple[float, int]:
    tracemalloc.start()
    fn()
    peak_bytes = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times), peak_bytes


def _qkv(seed, tag: int, n: int, d_k: int, d_v: int, dtype):
    rng = np.random.default_rng((seed, tag, n))
    Q = rng.standard_normal((n, d_k)).astype(dtype)
    K = rng.standard_normal((n, d_k)).astype(dtype)
    V = rng.standard_normal((n, d_v)).astype(dtype)
    return Q, K, V


def _saturation_probe(cfg: AttnConfig, seed: int) -> float:
    n = cfg.chunk_size * (cfg.top_k + 1)
    Q, K, V = _qkv(seed, 1, n, cfg.d_k, cfg.d_v, DOUBLE)
    sparse_out = prefill(Q, K, V, cfg)
    full_out = full_attention(Q, K, V, cfg.d_k, causal=True)
    return float(np.max(np.abs(sparse_out - full_out)))


def _sparse_decode_record(
    cfg: AttnConfig, n: int, steps: int, seed: int
) -> LatencyRecord:
    cache = KvCache(cfg.d_k, cfg.d_v, cfg.budget, cfg.window, dtype=SINGLE)
    Q, K, V = _qkv(seed, 2, n + steps + 8, cfg.d_k, cfg.d_v, SINGLE)
    for t in range(n):
        cache.append(Q[t], K[t], V[t])
    tracemalloc.start()
    for t in range(n, n + 8):
        cache.append(Q[t], K[t], V[t])
        decode_step(Q[t], cache, cfg)
    peak_bytes = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    per_step = []
    for t in range(n + 8, n + 8 + steps):
        start = time.perf_counter()
        cache.append(Q[t], K[t], V[t])
        decode_step(Q[t], cache, cfg)
        per_step.append(time.perf_counter() - start)
    return LatencyRecord(
        phase="sparse_decode",
        context_len=n,
        wall_time=statistics.median(per_step),
        peak_entries=cache.peak_size,
        peak_bytes=peak_bytes,
    )


def _full_decode_record(
    cfg: AttnConfig, n: int, steps: int, seed: int
) -> LatencyRecord:
    total = n + steps + 8
    Q, K, V = _qkv(seed, 3, total, cfg.d_k, cfg.d_v, SINGLE)
    scale = 1.0 / np.sqrt(np.float32(cfg.d_k))

    def one_step(t: int):
        scores = (K[: t + 1] @ Q[t]) * scale
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        return weights @ V[: t + 1]

    tracemalloc.start()
    for t in range(n, n + 8):
        one_step(t)
    peak_bytes = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    per_step = []
    for t in range(n + 8, n + 8 + steps):
        start = time.perf_counter()
        one_step(t)
        per_step.append(time.perf_counter() - start)
    return LatencyRecord(
        phase="full_decode",
        context_len=n,
        wall_time=statistics.median(per_step),
        peak_entries=total,
        peak_bytes=peak_bytes,
    )


def compare_sparse_full(
    cfg: AttnConfig,
    lengths,
    repeats: int = 3,
    steps: int = 64,
    seed: int = 0,
) -> ComparisonTable:
    """Run the sparse kernel and the dense causal reference side by side.

    Prefill rows time the whole pass per length in single precision;
    decode rows time single appended steps at each context length. The
    exponent fits need at least three lengths and are skipped otherwise.
    """
    _check_lengths(lengths)
    table = ComparisonTable()
    for n in lengths:
        Q, K, V = _qkv(seed, 0, n, cfg.d_k, cfg.d_v, SINGLE)
        sparse_time, sparse_bytes = _timed(lambda: prefill(Q, K, V, cfg), repeats)
        table.records.append(
            LatencyRecord("sparse_prefill", n, sparse_time, n, sparse_bytes)
        )
        full_time, full_bytes = _timed(
            lambda: full_attention(Q, K, V, cfg.d_k, causal=True), repeats
        )
        table.records.append(
            LatencyRecord("full_prefill", n, full_time, n, full_bytes)
        )
    for n in lengths:
        table.records.append(_sparse_decode_record(cfg, n, steps, seed))
        table.records.append(_full_decode_record(cfg, n, steps, seed))

    by_phase = {}
    for rec in table.records:
        by_phase.setdefault(rec.phase, []).append(rec)
    if len(lengths) >= 3:
        for phase in ("sparse_prefill", "full_prefill"):
            table.exponents[phase] = fit_scaling(by_phase[phase])
    table.saturated_max_err = _saturation_probe(cfg, seed)
    return table
