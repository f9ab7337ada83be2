"""Command-line surface.

Subcommands: verify (invariant checks, the canonical acceptance entry
point), bench (latency/memory report with figures), expand (block
expansion of a checkpoint), demo (greedy byte-level generation) and
gen-task (passkey task emission).

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ModelConfig, apply_overrides, load_config
from .errors import CheckpointVersionError, InputError
from .kv_cache import KvCache, importance_scores, retained_indices
from .model import (
    HybridModel,
    attention_positions,
    expand_blocks,
    expansion_layer_count,
    greedy_generate,
    load_model,
    save_model,
)
from .rwkv7 import Rwkv7Inputs, Rwkv7State, rwkv7_forward, transition_matrix
from .sparse_attn import (
    AttnConfig,
    AttnTrace,
    decode_step,
    full_attention,
    prefill,
    sparse_attend,
    sparse_attend_backward,
)
from .tensor import finite_diff_grad


def _random_rwkv_inputs(rng, d_k: int, d_v: int, n: int) -> list:
    seq = []
    for _ in range(n):
        seq.append(
            Rwkv7Inputs(
                w=rng.uniform(0.2, 1.0, d_k),
                a=rng.uniform(0.0, 1.0, d_k),
                kappa_hat=rng.standard_normal(d_k),
                k_tilde=rng.standard_normal(d_k),
                v=rng.standard_normal(d_v),
                r=rng.standard_normal(d_k),
            )
        )
    return seq


def _check_recurrence_oracle(cfg: ModelConfig):
    rng = np.random.default_rng((cfg.seed, 11))
    d_k, d_v, n = 8, 6, 48
    seq = _random_rwkv_inputs(rng, d_k, d_v, n)
    outputs, final = rwkv7_forward(seq, Rwkv7State.zeros(d_v, d_k))
    S = np.zeros((d_v, d_k))
    max_err = 0.0
    for step, out in zip(seq, outputs):
        S = S @ transition_matrix(step.w, step.kappa_hat, step.a) + np.outer(
            step.v, step.k_tilde
        )
        max_err = max(max_err, float(np.max(np.abs(out - S @ step.r))))
    if max_err > 1e-10:
        return False, f"oracle deviation {max_err:.2e} > 1e-10"
    half = n // 2
    _, state_a = rwkv7_forward(seq[:half], Rwkv7State.zeros(d_v, d_k))
    _, state_b = rwkv7_forward(seq[half:], state_a)
    if not np.array_equal(state_b.S, final.S):
        return False, "prefix-split states differ"
    return True, f"max deviation {max_err:.2e}"


def _check_sparse_vs_full(cfg: ModelConfig):
    rng = np.random.default_rng((cfg.seed, 12))
    n, chunk = 96, 16
    attn = AttnConfig(
        chunk_size=chunk, top_k=-(-n // chunk), d_k=cfg.d_k, d_v=cfg.d_v,
        budget=None, window=chunk,
    )
    Q = rng.standard_normal((n, cfg.d_k))
    K = rng.standard_normal((n, cfg.d_k))
    V = rng.standard_normal((n, cfg.d_v))
    err = float(
        np.max(np.abs(prefill(Q, K, V, attn) - full_attention(Q, K, V, cfg.d_k, causal=True)))
    )
    if err > 1e-10:
        return False, f"saturated sparse vs full deviates by {err:.2e}"
    return True, f"max deviation {err:.2e}"


def _check_decode_prefill(cfg: ModelConfig):
    attn = replace(cfg.attn, budget=None, chunk_size=16, window=16)
    model = HybridModel.create(replace(cfg, precision="double", attn=attn))
    rng = np.random.default_rng((cfg.seed, 13))
    tokens = rng.integers(0, cfg.vocab_size, 96)
    full_logits, _ = model.forward(tokens, mode="prefill")
    state = None
    last = None
    for tok in tokens:
        last, state = model.forward([int(tok)], mode="decode", state=state)
    err = float(np.max(np.abs(full_logits[-1] - last[-1])))
    if err > 1e-10:
        return False, f"decode deviates from prefill by {err:.2e}"
    return True, f"max deviation {err:.2e}"


def _check_cache_budget(cfg: ModelConfig):
    rng = np.random.default_rng((cfg.seed, 14))
    budget, window = 32, 8
    attn = AttnConfig(
        chunk_size=8, top_k=2, d_k=cfg.d_k, d_v=cfg.d_v,
        budget=budget, window=window,
    )
    cache = KvCache(cfg.d_k, cfg.d_v, budget, window)
    trace = AttnTrace()
    steps = 400
    for _ in range(steps):
        cache.append(
            rng.standard_normal(cfg.d_k),
            rng.standard_normal(cfg.d_k),
            rng.standard_normal(cfg.d_v),
        )
        decode_step(rng.standard_normal(cfg.d_k), cache, attn, trace)
        if cache.size > budget + window:
            return False, f"cache grew to {cache.size} > {budget + window}"
    if cache.size != budget + window:
        return False, f"steady-state size {cache.size} != {budget + window}"
    bound = attn.top_k * attn.chunk_size + window
    worst = max(att.size for _, _, att in trace.records)
    if worst > bound:
        return False, f"attended {worst} entries > bound {bound}"
    return True, f"size {cache.size}, attended <= {worst} of bound {bound}"


def _check_expansion_identity(cfg: ModelConfig):
    base_cfg = ModelConfig(
        n_layers=4, d_model=32, d_k=16, d_v=16, vocab_size=64,
        attn_ratio=0.0,
        attn=AttnConfig(chunk_size=8, top_k=2, d_k=16, d_v=16, budget=64, window=8),
        seed=cfg.seed,
    )
    base = HybridModel.create(base_cfg)
    expanded = expand_blocks(base, positions=(1, 4))
    rng = np.random.default_rng((cfg.seed, 15))
    for _ in range(5):
        tokens = rng.integers(0, base_cfg.vocab_size, 40)
        got, _ = expanded.forward(tokens)
        want, _ = base.forward(tokens)
        if not np.array_equal(got, want):
            return False, "expanded logits differ from base at init"
    return True, "bitwise identical on 5 inputs"


def _check_gradients(cfg: ModelConfig):
    rng = np.random.default_rng((cfg.seed, 16))
    n_sel, d_k, d_v = 16, 8, 8
    worst = 0.0
    for _ in range(10):
        q = rng.standard_normal(d_k)
        K = rng.standard_normal((n_sel, d_k))
        V = rng.standard_normal((n_sel, d_v))
        g = rng.standard_normal(d_v)
        dq, dK, dV = sparse_attend_backward(q, K, V, d_k, g)
        cases = (
            (q, dq, lambda x: float(sparse_attend(x, K, V, d_k) @ g)),
            (K, dK, lambda x: float(sparse_attend(q, x.reshape(K.shape), V, d_k) @ g)),
            (V, dV, lambda x: float(sparse_attend(q, K, x.reshape(V.shape), d_k) @ g)),
        )
        for point, grad, loss in cases:
            num = finite_diff_grad(loss, point.ravel().copy(), eps=1e-5)
            denom = max(float(np.linalg.norm(num)), 1e-12)
            rel = float(np.linalg.norm(grad.ravel() - num)) / denom
            worst = max(worst, rel)
    if worst > 1e-4:
        return False, f"max relative error {worst:.2e} > 1e-4"
    return True, f"max relative error {worst:.2e}"


def _check_compression_oracle(cfg: ModelConfig):
    rng = np.random.default_rng((cfg.seed, 17))
    d_k, n_obs, n_past = 8, 4, 9
    Q_obs = rng.standard_normal((n_obs, d_k))
    K_past = rng.standard_normal((n_past, d_k))
    got = importance_scores(Q_obs, K_past, d_k)
    want = np.zeros(n_past)
    for i in range(n_obs):
        logits = K_past @ Q_obs[i] / np.sqrt(d_k)
        weights = np.exp(logits - logits.max())
        want += weights / weights.sum()
    err = float(np.max(np.abs(got - want)))
    if err > 1e-10:
        return False, f"importance scores deviate by {err:.2e}"

    scores = rng.integers(0, 3, n_past).astype(float) / 2.0
    for budget in range(1, n_past + 1):
        kept = retained_indices(scores, budget)
        best = max(
            itertools.combinations(range(n_past), budget),
            key=lambda subset: sorted(
                ((scores[i], i) for i in subset), reverse=True
            ),
        )
        if tuple(kept) != tuple(sorted(best)):
            return False, f"retention differs from enumeration at budget {budget}"
    return True, f"scores within {err:.2e}, retention matches enumeration"


def _check_checkpoint_roundtrip(cfg: ModelConfig):
    small = ModelConfig(
        n_layers=3, d_model=24, d_k=12, d_v=12, vocab_size=48,
        attn_ratio=0.34,
        attn=AttnConfig(chunk_size=6, top_k=2, d_k=12, d_v=12, budget=24, window=6),
        seed=cfg.seed,
    )
    model = HybridModel.create(small)
    rng = np.random.default_rng((cfg.seed, 18))
    tokens = rng.integers(0, small.vocab_size, 30)
    want, _ = model.forward(tokens)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_model(model, path)
        reloaded = load_model(path)
        got, _ = reloaded.forward(tokens)
        if not np.array_equal(got, want):
            return False, "round-tripped logits differ"
        payload = bytearray(path.read_bytes())
        payload[4] = 0xFF
        bad = Path(tmp) / "bad.ckpt"
        bad.write_bytes(bytes(payload))
        try:
            load_model(bad)
        except CheckpointVersionError:
            pass
        else:
            return False, "version corruption went undetected"
    return True, "bitwise round-trip, version check enforced"


_CHECKS = (
    ("recurrence_oracle", _check_recurrence_oracle),
    ("sparse_vs_full", _check_sparse_vs_full),
    ("decode_prefill_consistency", _check_decode_prefill),
    ("cache_budget", _check_cache_budget),
    ("expansion_identity", _check_expansion_identity),
    ("gradient_check", _check_gradients),
    ("compression_oracle", _check_compression_oracle),
    ("checkpoint_roundtrip", _check_checkpoint_roundtrip),
)


def _load_cfg(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    overrides = getattr(args, "set", None)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    results = {}
    failures = 0
    for name, check in _CHECKS:
        ok, detail = check(cfg)
        if args.inject_fault == name:
            ok, detail = False, "fault injected"
        results[name] = {"ok": ok, "detail": detail}
        mark = "pass" if ok else "FAIL"
        print(f"check {name}: {mark} ({detail})")
        failures += 0 if ok else 1
    if args.out:
        Path(args.out).write_text(
            json.dumps(results, indent=2) + "\n", encoding="utf-8"
        )
    if failures:
        print(f"{failures} of {len(_CHECKS)} checks failed")
        return 1
    print(f"all {len(_CHECKS)} checks passed")
    return 0


def _parse_lengths(text: str) -> list:
    try:
        lengths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"lengths must be comma-separated integers, got {text!r}"
        ) from None
    if not lengths:
        raise argparse.ArgumentTypeError("no lengths given")
    return lengths


def cmd_bench(args) -> int:
    from . import report
    from .bench import compare_sparse_full, fit_scaling, measure_decode, measure_prefill

    cfg = _load_cfg(args)
    model = HybridModel.create(cfg)
    records = measure_prefill(model, args.lengths, repeats=args.repeats)
    records += measure_decode(model, args.lengths, steps=args.steps)
    table = compare_sparse_full(
        cfg.attn, args.lengths, repeats=args.repeats, steps=args.steps, seed=cfg.seed
    )
    records += table.records

    summary = {f"{phase}_exponent": exp for phase, exp in table.exponents.items()}
    model_prefill = [r for r in records if r.phase == "prefill"]
    if len(args.lengths) >= 3:
        summary["model_prefill_exponent"] = fit_scaling(model_prefill)
    decode = [r for r in records if r.phase == "decode"]
    if len(decode) >= 2:
        summary["decode_per_step_ratio"] = decode[-1].wall_time / decode[0].wall_time
    summary["saturated_max_err"] = table.saturated_max_err

    paths = report.write_all(records, summary, args.out)
    print(f"wrote {paths['csv']} and {paths['json']}")
    for fig in paths["figures"]:
        print(f"wrote {fig}")
    for key, value in summary.items():
        print(f"{key} = {value}")
    return 0


def cmd_expand(args) -> int:
    base = load_model(args.ckpt)
    n_base = base.layout.n_layers
    n_new = expansion_layer_count(n_base, args.ratio)
    if n_new == 0:
        save_model(base, args.out)
        print("ratio adds no layers; checkpoint copied unchanged")
        return 0
    positions = attention_positions(n_base + n_new, n_new)
    expanded = expand_blocks(base, positions)
    rng = np.random.default_rng((base.cfg.seed, 19))
    for _ in range(3):
        tokens = rng.integers(0, base.cfg.vocab_size, 32)
        got, _ = expanded.forward(tokens)
        want, _ = base.forward(tokens)
        if not np.array_equal(got, want):
            print("expansion identity: FAIL")
            return 1
    save_model(expanded, args.out)
    print(
        f"expanded {n_base} -> {n_base + n_new} layers, "
        f"attention inserted at {list(positions)}"
    )
    print("expansion identity: pass")
    return 0


def cmd_demo(args) -> int:
    from .bench import _peak_entries

    if args.tokens < 1:
        raise InputError("--tokens must be >= 1")
    cfg = _load_cfg(args)
    model = HybridModel.create(cfg)
    prompt = list(args.prompt.encode("utf-8"))
    produced, state = greedy_generate(model, prompt, args.tokens)
    text = bytes(t for t in produced if t < 256)
    print(f"prompt: {args.prompt!r}")
    print(f"generated: {text!r}")
    print(f"tokens_seen = {state.tokens_seen}")
    print(f"peak_entries = {_peak_entries(state)}")
    return 0


def cmd_gen_task(args) -> int:
    from .bench import NEEDLE_LENGTH, gen_passkey_task

    position = args.position
    if position is None:
        position = max(0, (args.length - NEEDLE_LENGTH) // 2)
    task = gen_passkey_task(args.length, position, args.seed)
    print(f"length = {task.context.size}")
    print(f"position = {task.needle_position}")
    print(f"key = {bytes(task.key_tokens.tolist()).decode('ascii')}")
    print(f"value = {bytes(task.value_tokens.tolist()).decode('ascii')}")
    if args.out:
        Path(args.out).write_bytes(bytes(task.context.tolist()))
        print(f"wrote {args.out}")
    return 0


def _add_common(sub, with_set=True):
    sub.add_argument("--config", help="path to a key = value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    if with_set:
        sub.add_argument(
            "--set", action="append", metavar="KEY=VALUE", default=[],
            help="override one config entry (repeatable)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridlm",
        description="Hybrid recurrence / sparse-attention engine utilities",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    verify = commands.add_parser("verify", help="run the invariant check suite")
    _add_common(verify)
    verify.add_argument("--out", help="write a JSON results file")
    verify.add_argument(
        "--inject-fault", choices=[name for name, _ in _CHECKS],
        help="test hook: force the named check to fail",
    )
    verify.set_defaults(func=cmd_verify)

    bench = commands.add_parser("bench", help="measure latency and memory")
    _add_common(bench)
    bench.add_argument(
        "--lengths", type=_parse_lengths, default=[1024, 2048, 4096],
        help="comma-separated context lengths",
    )
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--steps", type=int, default=64)
    bench.add_argument("--out", default="bench_report.csv")
    bench.set_defaults(func=cmd_bench)

    expand = commands.add_parser("expand", help="insert zero-init attention layers")
    expand.add_argument("--ckpt", required=True, help="base checkpoint path")
    expand.add_argument("--ratio", type=float, required=True)
    expand.add_argument("--out", required=True, help="expanded checkpoint path")
    expand.set_defaults(func=cmd_expand)

    demo = commands.add_parser("demo", help="greedy byte-level generation")
    _add_common(demo)
    demo.add_argument("--prompt", default="the quick brown fox ")
    demo.add_argument("--tokens", type=int, default=32)
    demo.set_defaults(func=cmd_demo)

    gen = commands.add_parser("gen-task", help="emit a passkey retrieval task")
    gen.add_argument("--length", type=int, default=4096)
    gen.add_argument("--position", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", help="write the context bytes here")
    gen.set_defaults(func=cmd_gen_task)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
