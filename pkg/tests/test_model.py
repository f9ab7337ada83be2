"""Tests for the hybrid stack: layout, forward modes, block expansion,
the weighted loss, and checkpoint round-trips."""

import numpy as np
import pytest

from hybridlm.checkpoint import (
    expect_shape,
    load_checkpoint,
    save_checkpoint,
)
from hybridlm.config import ModelConfig
from hybridlm.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DegenerateWeightsError,
    EmptyInputError,
    InputError,
    ShapeError,
)
from hybridlm.kv_cache import KvCache
from hybridlm.model import (
    ATTENTION,
    RECURRENCE,
    HybridModel,
    LayerLayout,
    attention_positions,
    build_layout,
    expand_blocks,
    expansion_layer_count,
    expected_shapes,
    freeze_mask,
    greedy_generate,
    init_params,
    load_model,
    save_model,
    uniform_weights,
    weighted_ce,
    weighted_ce_with_hook,
)
from hybridlm.rwkv7 import Rwkv7State
from hybridlm.sparse_attn import AttnConfig, AttnTrace


def tiny_cfg(**overrides):
    """A stack small enough for per-test forwards."""
    base = dict(
        n_layers=4,
        d_model=32,
        d_k=16,
        d_v=16,
        vocab_size=64,
        attn_ratio=0.5,
        attn=AttnConfig(chunk_size=8, top_k=2, d_k=16, d_v=16, budget=None, window=8),
        seed=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def model():
    return HybridModel.create(tiny_cfg())


@pytest.fixture
def tokens():
    return np.random.default_rng(21).integers(0, 64, 40)


class TestLayout:
    def test_quarter_ratio_twelve_layers(self):
        layout = build_layout(12, 0.25)
        assert layout.attention_indices == (3, 7, 11)

    def test_ratio_zero_is_pure_recurrence(self):
        assert all(k == RECURRENCE for k in build_layout(6, 0.0).kinds)

    def test_ratio_one_is_pure_attention(self):
        assert all(k == ATTENTION for k in build_layout(6, 1.0).kinds)

    def test_empty_model_rejected(self):
        with pytest.raises(EmptyInputError):
            build_layout(0, 0.25)

    def test_ratio_out_of_range(self):
        with pytest.raises(ConfigError):
            build_layout(4, 1.5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            LayerLayout(kinds=("recurrence", "feedforward"))

    def test_positions_even_spacing(self):
        assert attention_positions(15, 3) == (4, 9, 14)
        assert attention_positions(8, 2) == (3, 7)
        assert attention_positions(5, 0) == ()

    def test_expansion_count_rounding(self):
        assert expansion_layer_count(12, 0.25) == 3
        assert expansion_layer_count(2, 0.25) == 1  # 0.5 rounds up
        assert expansion_layer_count(10, 0.0) == 0


class TestInit:
    def test_param_names_and_shapes_match_contract(self):
        cfg = tiny_cfg()
        layout = build_layout(cfg.n_layers, cfg.attn_ratio)
        params = init_params(cfg, layout)
        shapes = expected_shapes(cfg, layout)
        assert set(params) == set(shapes)
        for name, shape in shapes.items():
            assert params[name].shape == shape

    def test_norm_gains_start_at_one(self):
        cfg = tiny_cfg()
        params = init_params(cfg, build_layout(cfg.n_layers, cfg.attn_ratio))
        assert np.all(params["final_norm_gain"] == 1.0)
        assert np.all(params["layers.0.norm_gain"] == 1.0)

    def test_seeded_init_is_reproducible(self):
        cfg = tiny_cfg()
        a = HybridModel.create(cfg)
        b = HybridModel.create(cfg)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])

    def test_single_precision_dtype(self):
        cfg = tiny_cfg(precision="single")
        model = HybridModel.create(cfg)
        assert model.params["embedding"].dtype == np.float32
        assert model.dtype == np.float32


class TestForward:
    def test_logits_shape(self, model, tokens):
        logits, state = model.forward(tokens)
        assert logits.shape == (tokens.size, model.cfg.vocab_size)
        assert state.tokens_seen == tokens.size

    def test_prefill_rejects_carried_state(self, model, tokens):
        _, state = model.forward(tokens)
        with pytest.raises(InputError):
            model.forward(tokens, mode="prefill", state=state)

    def test_unknown_mode_rejected(self, model, tokens):
        with pytest.raises(InputError):
            model.forward(tokens, mode="train")

    def test_out_of_vocab_rejected(self, model):
        with pytest.raises(InputError):
            model.forward(np.array([0, 64]))

    def test_non_integer_tokens_rejected(self, model):
        with pytest.raises(InputError):
            model.forward(np.array([0.5, 1.5]))

    def test_empty_sequence_rejected(self, model):
        with pytest.raises(EmptyInputError):
            model.forward(np.array([], dtype=np.int64))

    def test_prefill_then_decode_seam_is_invisible(self, model, tokens):
        """Prefill is the decode loop run in batch; splitting the sequence
        only perturbs the batched projections at the last bit."""
        whole, _ = model.forward(tokens)
        head, state = model.forward(tokens[:17])
        tail, _ = model.forward(tokens[17:], mode="decode", state=state)
        assert np.max(np.abs(whole[:17] - head)) < 1e-10
        assert np.max(np.abs(whole[17:] - tail)) < 1e-10

    def test_zero_head_zeroes_logits(self, model, tokens):
        model.params["head"][:] = 0.0
        logits, _ = model.forward(tokens)
        assert not logits.any()

    def test_token_order_matters(self, model):
        """No positional encoding, but the recurrence is order sensitive."""
        seq = np.array([1, 2, 3, 4, 5, 6, 7, 8])
        fwd, _ = model.forward(seq)
        rev, _ = model.forward(seq[::-1].copy())
        assert not np.allclose(fwd[-1], rev[-1], atol=1e-6)

    def test_ratio_zero_state_has_no_caches(self):
        model = HybridModel.create(tiny_cfg(attn_ratio=0.0))
        state = model.fresh_state()
        assert all(isinstance(s, Rwkv7State) for s in state.layers)
        assert state.cache_sizes() == []

    def test_ratio_one_state_is_all_caches(self):
        model = HybridModel.create(tiny_cfg(attn_ratio=1.0))
        state = model.fresh_state()
        assert all(isinstance(s, KvCache) for s in state.layers)

    def test_trace_collects_attention_positions(self, model, tokens):
        trace = AttnTrace()
        model.forward(tokens, trace=trace)
        n_attn = len(model.layout.attention_indices)
        assert len(trace.records) == tokens.size * n_attn

    def test_decode_respects_budget(self):
        cfg = tiny_cfg(
            attn=AttnConfig(chunk_size=8, top_k=2, d_k=16, d_v=16, budget=16, window=8)
        )
        model = HybridModel.create(cfg)
        state = None
        rng = np.random.default_rng(22)
        for _ in range(80):
            tok = int(rng.integers(0, cfg.vocab_size))
            _, state = model.forward([tok], mode="decode", state=state)
        assert all(size == 24 for size in state.cache_sizes())


class TestExpansion:
    def test_identity_at_init(self, tokens):
        base = HybridModel.create(tiny_cfg(attn_ratio=0.0))
        expanded = expand_blocks(base, positions=(1, 3))
        got, _ = expanded.forward(tokens)
        want, _ = base.forward(tokens)
        assert np.array_equal(got, want)

    def test_no_positions_copies_model(self, model, tokens):
        clone = expand_blocks(model, positions=())
        assert clone.layout.kinds == model.layout.kinds
        for name in model.params:
            assert np.array_equal(clone.params[name], model.params[name])
        got, _ = clone.forward(tokens)
        want, _ = model.forward(tokens)
        assert np.array_equal(got, want)

    def test_inserted_layers_are_attention(self):
        base = HybridModel.create(tiny_cfg(attn_ratio=0.0))
        expanded = expand_blocks(base, positions=(0, 2))
        assert expanded.layout.kinds[0] == ATTENTION
        assert expanded.layout.kinds[2] == ATTENTION
        assert expanded.layout.n_layers == base.layout.n_layers + 2
        # surviving base layers keep their order
        kept = [k for i, k in enumerate(expanded.layout.kinds) if i not in (0, 2)]
        assert tuple(kept) == base.layout.kinds

    def test_perturbed_output_projection_goes_live(self, tokens):
        base = HybridModel.create(tiny_cfg(attn_ratio=0.0))
        expanded = expand_blocks(base, positions=(2,))
        expanded.params["layers.2.out_proj"] += 0.05
        got, _ = expanded.forward(tokens)
        want, _ = base.forward(tokens)
        assert not np.array_equal(got, want)

    def test_duplicate_positions_rejected(self, model):
        with pytest.raises(InputError):
            expand_blocks(model, positions=(1, 1))

    def test_out_of_range_position_rejected(self, model):
        with pytest.raises(IndexError):
            expand_blocks(model, positions=(99,))

    def test_freeze_mask_frees_only_new_layers(self):
        base = HybridModel.create(tiny_cfg(attn_ratio=0.0))
        expanded = expand_blocks(base, positions=(1, 4))
        mask = freeze_mask(expanded, (1, 4))
        assert mask["embedding"] and mask["head"]
        assert mask["layers.0.norm_gain"]
        assert not mask["layers.1.q_proj"]
        assert not mask["layers.4.out_proj"]
        assert mask["layers.2.decay_proj"]


class TestWeightedCE:
    @pytest.fixture
    def instance(self):
        rng = np.random.default_rng(23)
        logits = rng.standard_normal((12, 9))
        targets = rng.integers(0, 9, 12)
        return logits, targets

    def test_uniform_equals_mean_ce(self, instance):
        logits, targets = instance
        got = weighted_ce(logits, targets, np.ones(12))
        m = logits.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
        want = float(np.mean(lse - logits[np.arange(12), targets]))
        assert abs(got - want) < 1e-12

    def test_single_weight_selects_one_token(self, instance):
        logits, targets = instance
        weights = np.zeros(12)
        weights[5] = 1.0
        got = weighted_ce(logits, targets, weights)
        row = logits[5]
        want = float(np.log(np.exp(row - row.max()).sum()) + row.max() - row[targets[5]])
        assert abs(got - want) < 1e-12

    def test_scaling_weights_is_invariant(self, instance):
        logits, targets = instance
        w = np.random.default_rng(24).uniform(0.1, 2.0, 12)
        assert weighted_ce(logits, targets, w) == pytest.approx(
            weighted_ce(logits, targets, 2.0 * w), abs=1e-12
        )

    def test_all_zero_weights_rejected(self, instance):
        logits, targets = instance
        with pytest.raises(DegenerateWeightsError):
            weighted_ce(logits, targets, np.zeros(12))

    def test_negative_weights_rejected(self, instance):
        logits, targets = instance
        weights = np.ones(12)
        weights[0] = -1.0
        with pytest.raises(InputError):
            weighted_ce(logits, targets, weights)

    def test_shape_guards(self, instance):
        logits, targets = instance
        with pytest.raises(ShapeError):
            weighted_ce(logits, targets[:5], np.ones(5))
        with pytest.raises(ShapeError):
            weighted_ce(logits, targets, np.ones(5))

    def test_target_out_of_vocab(self, instance):
        logits, _ = instance
        bad = np.full(12, 9)
        with pytest.raises(InputError):
            weighted_ce(logits, bad, np.ones(12))

    def test_hook_defaults_to_uniform(self, instance):
        logits, targets = instance
        assert weighted_ce_with_hook(logits, targets) == weighted_ce(
            logits, targets, uniform_weights(targets)
        )


class TestGreedyGenerate:
    def test_produces_requested_count(self, model):
        produced, state = greedy_generate(model, [1, 2, 3], steps=5)
        assert len(produced) == 5
        assert state.tokens_seen == 3 + 5

    def test_deterministic(self, model):
        a, _ = greedy_generate(model, [4, 5], steps=6)
        b, _ = greedy_generate(model, [4, 5], steps=6)
        assert a == b


class TestCheckpoint:
    def test_array_round_trip_bitwise(self, tmp_path):
        cfg = tiny_cfg()
        rng = np.random.default_rng(25)
        arrays = {
            "a": rng.standard_normal((3, 4)),
            "b": rng.standard_normal(7).astype(np.float32),
            "c": rng.standard_normal((2, 2, 2)),
        }
        path = tmp_path / "arrays.ckpt"
        save_checkpoint(path, cfg, arrays)
        loaded_cfg, loaded = load_checkpoint(path)
        assert loaded_cfg == cfg
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            assert np.array_equal(loaded[name], arrays[name])

    def test_model_round_trip_bitwise(self, model, tokens, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        reloaded = load_model(path)
        assert reloaded.layout.kinds == model.layout.kinds
        got, _ = reloaded.forward(tokens)
        want, _ = model.forward(tokens)
        assert np.array_equal(got, want)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_corruption_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        payload = bytearray(path.read_bytes())
        payload[4] = 0xFE
        path.write_bytes(bytes(payload))
        with pytest.raises(CheckpointVersionError):
            load_model(path)

    def test_truncated_file_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointTruncatedError):
            load_model(path)

    def test_missing_parameter_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        del arrays["layers.0.decay_proj"]
        save_checkpoint(path, cfg, arrays)
        with pytest.raises(CheckpointShapeError):
            load_model(path)

    def test_unexpected_array_rejected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        arrays["stray"] = np.zeros(3)
        save_checkpoint(path, cfg, arrays)
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_wrong_shape_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        arrays["head"] = arrays["head"][:, :-1].copy()
        save_checkpoint(path, cfg, arrays)
        with pytest.raises(CheckpointShapeError):
            load_model(path)

    def test_precision_mismatch_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        arrays["head"] = arrays["head"].astype(np.float32)
        save_checkpoint(path, cfg, arrays)
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_layout_length_mismatch_detected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        arrays["layout.kinds"] = arrays["layout.kinds"][:-1].copy()
        save_checkpoint(path, cfg, arrays)
        with pytest.raises(CheckpointShapeError):
            load_model(path)

    def test_load_without_layout_record_uses_ratio(self, model, tokens, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        cfg, arrays = load_checkpoint(path)
        del arrays["layout.kinds"]
        save_checkpoint(path, cfg, arrays)
        reloaded = load_model(path)
        assert reloaded.layout.kinds == model.layout.kinds

    def test_expect_shape_error_message(self):
        with pytest.raises(CheckpointShapeError, match="expected"):
            expect_shape("w", np.zeros((2, 3)), (3, 2))

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(
                tmp_path / "x.ckpt", tiny_cfg(), {"a": np.zeros(3, dtype=np.int32)}
            )
