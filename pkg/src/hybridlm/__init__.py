"""Desk-scale hybrid sequence engine.

Delta-rule recurrence interleaved with top-k chunk sparse attention,
a constant-budget KV cache, block expansion, and a benchmark harness
with dense-attention oracles for verification.
"""

from .config import (
    ModelConfig,
    apply_overrides,
    format_config,
    load_config,
    parse_config,
)
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    CompressionUndefinedError,
    ConfigError,
    DegenerateWeightsError,
    EmptyInputError,
    InputError,
    InsufficientDataError,
    OracleFailureError,
    ShapeError,
)
from .kv_cache import KvCache, dump_cache, importance_scores, load_cache
from .model import (
    ATTENTION,
    RECURRENCE,
    HybridModel,
    LayerLayout,
    StackState,
    build_layout,
    expand_blocks,
    forward,
    freeze_mask,
    greedy_generate,
    load_model,
    save_model,
    weighted_ce,
    weighted_ce_with_hook,
)
from .rwkv7 import (
    Rwkv7Inputs,
    Rwkv7State,
    normalize_removal_key,
    readout,
    rwkv7_forward,
    rwkv7_stream,
    state_step,
    transition_matrix,
)
from .sparse_attn import (
    AttnConfig,
    AttnTrace,
    chunk_key_means,
    chunk_scores,
    decode_step,
    full_attention,
    prefill,
    select_topk,
    sparse_attend,
    sparse_attend_backward,
)
from .bench import (
    ComparisonTable,
    LatencyRecord,
    PasskeyTask,
    compare_sparse_full,
    fit_scaling,
    gen_passkey_task,
    measure_decode,
    measure_prefill,
)

__version__ = "0.1.0"

__all__ = [
    "ATTENTION",
    "AttnConfig",
    "AttnTrace",
    "CheckpointError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "ComparisonTable",
    "CompressionUndefinedError",
    "ConfigError",
    "DegenerateWeightsError",
    "EmptyInputError",
    "HybridModel",
    "InputError",
    "InsufficientDataError",
    "KvCache",
    "LatencyRecord",
    "LayerLayout",
    "ModelConfig",
    "OracleFailureError",
    "PasskeyTask",
    "RECURRENCE",
    "Rwkv7Inputs",
    "Rwkv7State",
    "ShapeError",
    "StackState",
    "apply_overrides",
    "build_layout",
    "chunk_key_means",
    "chunk_scores",
    "compare_sparse_full",
    "decode_step",
    "dump_cache",
    "expand_blocks",
    "fit_scaling",
    "format_config",
    "forward",
    "freeze_mask",
    "full_attention",
    "gen_passkey_task",
    "greedy_generate",
    "importance_scores",
    "load_cache",
    "load_config",
    "load_model",
    "measure_decode",
    "measure_prefill",
    "normalize_removal_key",
    "parse_config",
    "prefill",
    "readout",
    "rwkv7_forward",
    "rwkv7_stream",
    "save_model",
    "select_topk",
    "sparse_attend",
    "sparse_attend_backward",
    "state_step",
    "transition_matrix",
    "weighted_ce",
    "weighted_ce_with_hook",
]
