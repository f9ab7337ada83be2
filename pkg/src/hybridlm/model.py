"""The hybrid stack: recurrence and chunk-sparse attention on one residual stream.

Layers are interleaved according to a layout built from the attention
ratio. Every block is pre-norm residual: ``x + block(rms(x) * gain)``.
There is no positional encoding; order sensitivity comes entirely from
the recurrent state and the causal attention rule.

Prefill and decode run the same per-layer arithmetic. Prefill batches
the projections over the whole sequence and then steps the stateful
kernels position by position, so a prefill followed by decode steps is
indistinguishable from decoding the entire stream token by token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import expect_shape, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    DegenerateWeightsError,
    EmptyInputError,
    InputError,
    ShapeError,
)
from .kv_cache import KvCache
from .rwkv7 import Rwkv7State, step_state_raw
from .sparse_attn import AttnTrace, decode_step
from .tensor import DOUBLE, SINGLE, Matrix, Vector

RECURRENCE = "recurrence"
ATTENTION = "sparse_attention"

_NORM_EPS = 1e-6
_EXPANSION_STREAM = 7  # seed-sequence tag for expansion-time draws

_RECURRENCE_PARAMS = (
    ("norm_gain", ("d_model",)),
    ("decay_proj", ("d_k", "d_model")),
    ("erase_proj", ("d_k", "d_model")),
    ("removal_proj", ("d_k", "d_model")),
    ("key_proj", ("d_k", "d_model")),
    ("value_proj", ("d_v", "d_model")),
    ("query_proj", ("d_k", "d_model")),
    ("gate_proj", ("d_v", "d_model")),
    ("out_proj", ("d_model", "d_v")),
)

_ATTENTION_PARAMS = (
    ("norm_gain", ("d_model",)),
    ("q_proj", ("d_k", "d_model")),
    ("k_proj", ("d_k", "d_model")),
    ("v_proj", ("d_v", "d_model")),
    ("out_proj", ("d_model", "d_v")),
)


@dataclass(frozen=True)
class LayerLayout:
    """Ordered layer kinds for the stack."""

    kinds: tuple

    def __post_init__(self):
        for kind in self.kinds:
            if kind not in (RECURRENCE, ATTENTION):
                raise ConfigError(f"unknown layer kind {kind!r}")

    @property
    def n_layers(self) -> int:
        return len(self.kinds)

    @property
    def attention_indices(self) -> tuple:
        return tuple(i for i, k in enumerate(self.kinds) if k == ATTENTION)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def expansion_layer_count(n_base: int, ratio: float) -> int:
    """How many attention layers a given expansion ratio adds to a base."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("expansion ratio must lie in [0, 1]")
    return _round_half_up(n_base * ratio)


def attention_positions(n_layers: int, n_attn: int) -> tuple:
    """Evenly spaced attention slots: layer i qualifies when (i + 1) is a
    multiple of round(n_layers / n_attn)."""
    if n_attn == 0:
        return ()
    period = max(1, _round_half_up(n_layers / n_attn))
    return tuple(i for i in range(n_layers) if (i + 1) % period == 0)


def build_layout(n_layers: int, attn_ratio: float) -> LayerLayout:
    """Place round(n_layers * attn_ratio) attention layers evenly.

    With 12 layers at ratio 0.25 that puts attention at indices 3, 7 and
    11; ratio 0 gives a pure recurrence stack and ratio 1 a pure
    attention stack.
    """
    if n_layers < 1:
        raise EmptyInputError("a model needs at least one layer")
    if not 0.0 <= attn_ratio <= 1.0:
        raise ConfigError("attn_ratio must lie in [0, 1]")
    n_attn = _round_half_up(n_layers * attn_ratio)
    spots = set(attention_positions(n_layers, n_attn))
    kinds = tuple(
        ATTENTION if i in spots else RECURRENCE for i in range(n_layers)
    )
    return LayerLayout(kinds=kinds)


def _layer_specs(kind: str):
    return _RECURRENCE_PARAMS if kind == RECURRENCE else _ATTENTION_PARAMS


def _resolve(spec, cfg: ModelConfig) -> tuple:
    dims = {"d_model": cfg.d_model, "d_k": cfg.d_k, "d_v": cfg.d_v}
    return tuple(dims[name] for name in spec)


def expected_shapes(cfg: ModelConfig, layout: LayerLayout) -> dict:
    shapes = {"embedding": (cfg.vocab_size, cfg.d_model)}
    for i, kind in enumerate(layout.kinds):
        for name, spec in _layer_specs(kind):
            shapes[f"layers.{i}.{name}"] = _resolve(spec, cfg)
    shapes["final_norm_gain"] = (cfg.d_model,)
    shapes["head"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def _uniform(rng, shape, dtype):
    bound = 1.0 / math.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, layout: LayerLayout) -> dict:
    """Seeded init: uniform scaled by 1/sqrt(fan_in), norm gains at one."""
    dtype = DOUBLE if cfg.precision == "double" else SINGLE
    rng = np.random.default_rng(cfg.seed)
    params = {"embedding": _uniform(rng, (cfg.vocab_size, cfg.d_model), dtype)}
    for i, kind in enumerate(layout.kinds):
        for name, spec in _layer_specs(kind):
            shape = _resolve(spec, cfg)
            if name == "norm_gain":
                params[f"layers.{i}.{name}"] = np.ones(shape, dtype=dtype)
            else:
                params[f"layers.{i}.{name}"] = _uniform(rng, shape, dtype)
    params["final_norm_gain"] = np.ones(cfg.d_model, dtype=dtype)
    params["head"] = _uniform(rng, (cfg.vocab_size, cfg.d_model), dtype)
    return params


def _rms_rows(x: Matrix) -> Matrix:
    scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)
    return x / scale


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -50.0, 50.0)))


def _normalize_rows(x: Matrix) -> Matrix:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass
class StackState:
    """Carried inference state: one entry per layer, plus a token count."""

    layers: list
    tokens_seen: int = 0

    def cache_sizes(self) -> list:
        return [s.size for s in self.layers if isinstance(s, KvCache)]


@dataclass
class HybridModel:
    cfg: ModelConfig
    layout: LayerLayout
    params: dict

    @classmethod
    def create(cls, cfg: ModelConfig) -> "HybridModel":
        layout = build_layout(cfg.n_layers, cfg.attn_ratio)
        return cls(cfg=cfg, layout=layout, params=init_params(cfg, layout))

    @property
    def dtype(self):
        return DOUBLE if self.cfg.precision == "double" else SINGLE

    def param(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"layers.{layer}.{name}"]

    def fresh_state(self) -> StackState:
        layers = []
        for kind in self.layout.kinds:
            if kind == RECURRENCE:
                layers.append(Rwkv7State.zeros(self.cfg.d_v, self.cfg.d_k, self.dtype))
            else:
                attn = self.cfg.attn
                layers.append(
                    KvCache(attn.d_k, attn.d_v, attn.budget, attn.window, self.dtype)
                )
        return StackState(layers=layers)

    def _check_tokens(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens)
        if arr.ndim != 1:
            raise InputError("tokens must form a one-dimensional sequence")
        if arr.size == 0:
            raise EmptyInputError("token sequence is empty")
        if not np.issubdtype(arr.dtype, np.integer):
            raise InputError("token ids must be integers")
        if arr.min() < 0 or arr.max() >= self.cfg.vocab_size:
            raise InputError(
                f"token ids must lie in [0, {self.cfg.vocab_size}); "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        return arr.astype(np.intp)

    def _run_recurrence(self, layer: int, x_norm: Matrix, state: Rwkv7State) -> Matrix:
        decay = _sigmoid(x_norm @ self.param(layer, "decay_proj").T)
        erase = _sigmoid(x_norm @ self.param(layer, "erase_proj").T)
        removal = _normalize_rows(x_norm @ self.param(layer, "removal_proj").T)
        keys = x_norm @ self.param(layer, "key_proj").T
        values = x_norm @ self.param(layer, "value_proj").T
        queries = x_norm @ self.param(layer, "query_proj").T
        gates = _sigmoid(x_norm @ self.param(layer, "gate_proj").T)

        n = x_norm.shape[0]
        read = np.empty((n, self.cfg.d_v), dtype=x_norm.dtype)
        S = state.S
        for t in range(n):
            S = step_state_raw(S, decay[t], erase[t], removal[t], keys[t], values[t])
            read[t] = S @ queries[t]
        state.S = S
        return (gates * read) @ self.param(layer, "out_proj").T

    def _run_attention(
        self, layer: int, x_norm: Matrix, cache: KvCache, trace
    ) -> Matrix:
        Q = x_norm @ self.param(layer, "q_proj").T
        K = x_norm @ self.param(layer, "k_proj").T
        V = x_norm @ self.param(layer, "v_proj").T
        n = x_norm.shape[0]
        read = np.empty((n, self.cfg.d_v), dtype=x_norm.dtype)
        for t in range(n):
            cache.append(Q[t], K[t], V[t])
            read[t] = decode_step(Q[t], cache, self.cfg.attn, trace)
        return read @ self.param(layer, "out_proj").T

    def forward(
        self,
        tokens,
        mode: str = "prefill",
        state: StackState | None = None,
        trace: AttnTrace | None = None,
    ) -> tuple[Matrix, StackState]:
        """Run the stack over a token sequence.

        Prefill starts from a fresh state and covers the whole sequence;
        decode continues from a carried state, one token or several.
        Returns one logits row per input token plus the updated state.
        """
        if mode not in ("prefill", "decode"):
            raise InputError(f"mode must be 'prefill' or 'decode', got {mode!r}")
        if mode == "prefill" and state is not None:
            raise InputError("prefill starts fresh; pass mode='decode' to continue")
        if state is None:
            state = self.fresh_state()
        arr = self._check_tokens(tokens)

        x = self.params["embedding"][arr]
        for i, kind in enumerate(self.layout.kinds):
            x_norm = _rms_rows(x) * self.params[f"layers.{i}.norm_gain"]
            if kind == RECURRENCE:
                delta = self._run_recurrence(i, x_norm, state.layers[i])
            else:
                delta = self._run_attention(i, x_norm, state.layers[i], trace)
            x = x + delta
        x = _rms_rows(x) * self.params["final_norm_gain"]
        logits = x @ self.params["head"].T
        state.tokens_seen += int(arr.size)
        return logits, state


def forward(
    model: HybridModel, tokens, mode: str = "prefill", state=None, trace=None
):
    return model.forward(tokens, mode=mode, state=state, trace=trace)


def expand_blocks(base: HybridModel, positions) -> HybridModel:
    """Insert fresh attention layers at the given indices of the widened stack.

    New layers get seeded random projections except the output projection,
    which starts at zero, so the expanded model's logits match the base
    model's bit for bit until training moves those weights. Base
    parameters are copied verbatim.
    """
    pos = [int(p) for p in positions]
    if len(set(pos)) != len(pos):
        raise InputError("duplicate insertion positions")
    n_out = base.layout.n_layers + len(pos)
    for p in pos:
        if not 0 <= p < n_out:
            raise IndexError(f"insertion position {p} outside [0, {n_out})")

    dtype = base.dtype
    new_set = set(pos)
    params = {
        "embedding": base.params["embedding"].copy(),
        "final_norm_gain": base.params["final_norm_gain"].copy(),
        "head": base.params["head"].copy(),
    }
    kinds = []
    src = 0
    for idx in range(n_out):
        if idx in new_set:
            kinds.append(ATTENTION)
            rng = np.random.default_rng((base.cfg.seed, _EXPANSION_STREAM, idx))
            cfg_tmp = replace(base.cfg, n_layers=n_out)
            for name, spec in _ATTENTION_PARAMS:
                shape = _resolve(spec, cfg_tmp)
                if name == "norm_gain":
                    arr = np.ones(shape, dtype=dtype)
                elif name == "out_proj":
                    arr = np.zeros(shape, dtype=dtype)
                else:
                    arr = _uniform(rng, shape, dtype)
                params[f"layers.{idx}.{name}"] = arr
        else:
            kind = base.layout.kinds[src]
            kinds.append(kind)
            for name, _ in _layer_specs(kind):
                params[f"layers.{idx}.{name}"] = base.param(src, name).copy()
            src += 1
    cfg = replace(base.cfg, n_layers=n_out)
    return HybridModel(cfg=cfg, layout=LayerLayout(tuple(kinds)), params=params)


def freeze_mask(model: HybridModel, new_positions) -> dict:
    """Map parameter name -> True when it stays frozen after expansion.

    Base weights freeze; only the newly inserted layers train. This is
    the bookkeeping side of staged expansion, no optimizer lives here.
    """
    new_set = {int(p) for p in new_positions}
    mask = {}
    for name in model.params:
        if name.startswith("layers."):
            layer = int(name.split(".")[1])
            mask[name] = layer not in new_set
        else:
            mask[name] = True
    return mask


def weighted_ce(logits: Matrix, targets, weights) -> float:
    """Weighted mean cross-entropy: sum_t w_t * ce_t / sum_t w_t."""
    logits = np.asarray(logits)
    t = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be a 2-d matrix of rows per token")
    if t.shape != (logits.shape[0],):
        raise ShapeError("targets length must match logits rows")
    if w.shape != t.shape:
        raise ShapeError("weights length must match targets length")
    if t.min() < 0 or t.max() >= logits.shape[1]:
        raise InputError("target ids outside the logits vocabulary")
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    total = w.sum()
    if total == 0.0:
        raise DegenerateWeightsError("all token weights are zero")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    ce = lse - logits[np.arange(t.size), t]
    return float((w * ce).sum() / total)


def uniform_weights(targets) -> Vector:
    return np.ones(len(targets), dtype=np.float64)


def weighted_ce_with_hook(logits: Matrix, targets, weight_hook=uniform_weights) -> float:
    """Loss with a pluggable per-token weight function (default uniform)."""
    return weighted_ce(logits, targets, np.asarray(weight_hook(targets)))


def greedy_generate(
    model: HybridModel, prompt, steps: int, trace: AttnTrace | None = None
) -> tuple[list, StackState]:
    """Greedy decoding: prefill the prompt, then pick argmax step by step."""
    logits, state = model.forward(prompt, mode="prefill", trace=trace)
    produced = []
    tok = int(np.argmax(logits[-1]))
    for _ in range(steps):
        produced.append(tok)
        logits, state = model.forward([tok], mode="decode", state=state, trace=trace)
        tok = int(np.argmax(logits[-1]))
    return produced, state


_LAYOUT_KEY = "layout.kinds"


def save_model(model: HybridModel, path) -> None:
    arrays = dict(model.params)
    codes = np.array(
        [0.0 if k == RECURRENCE else 1.0 for k in model.layout.kinds], dtype=np.float64
    )
    arrays[_LAYOUT_KEY] = codes
    save_checkpoint(path, model.cfg, arrays)


def load_model(path) -> HybridModel:
    cfg, arrays = load_checkpoint(path)
    if _LAYOUT_KEY in arrays:
        codes = arrays.pop(_LAYOUT_KEY)
        if codes.shape != (cfg.n_layers,):
            raise CheckpointShapeError(
                f"layout record covers {codes.shape[0] if codes.ndim else 0} layers, "
                f"config says {cfg.n_layers}"
            )
        layout = LayerLayout(
            tuple(ATTENTION if c != 0.0 else RECURRENCE for c in codes)
        )
    else:
        layout = build_layout(cfg.n_layers, cfg.attn_ratio)
    want_dtype = DOUBLE if cfg.precision == "double" else SINGLE
    params = {}
    for name, shape in expected_shapes(cfg, layout).items():
        if name not in arrays:
            raise CheckpointShapeError(f"missing parameter {name!r}")
        arr = expect_shape(name, arrays.pop(name), shape)
        if arr.dtype != want_dtype:
            raise CheckpointError(
                f"parameter {name!r} stored as {arr.dtype}, "
                f"config precision is {cfg.precision}"
            )
        params[name] = arr
    if arrays:
        raise CheckpointError(f"unexpected arrays in checkpoint: {sorted(arrays)}")
    return HybridModel(cfg=cfg, layout=layout, params=params)
