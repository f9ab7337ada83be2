"""Generalized delta-rule recurrence (RWKV-7 style state evolution).

Per token the d_v x d_k state matrix decays channel-wise, erases the old
association along a normalized removal direction and writes a new one:

    S_t = S_{t-1} @ M_t + outer(v_t, k_t)
    M_t = diag(w_t) - outer(kappa_t, a_t * kappa_t)

with decay w in (0, 1], in-context learning rate a in [0, 1] and
unit-norm removal key kappa. The readout is a plain state/receptance
product; token-shift, gating and channel-mix sublayers of the full block
are intentionally not modelled here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import EmptyInputError, ShapeError
from .tensor import Matrix, Vector, DOUBLE


def normalize_removal_key(kappa: Vector) -> Vector:
    """L2-normalize; the recurrence needs a unit removal direction."""
    kappa = np.asarray(kappa, dtype=DOUBLE)
    norm = np.linalg.norm(kappa)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("removal key must be nonzero and finite")
    return kappa / norm


@dataclass(frozen=True)
class Rwkv7Inputs:
    """Per-token gate/key/value bundle. ``kappa_hat`` is normalized on construction."""

    w: Vector
    a: Vector
    kappa_hat: Vector
    k_tilde: Vector
    v: Vector
    r: Vector

    def __post_init__(self):
        w = np.asarray(self.w, dtype=DOUBLE)
        a = np.asarray(self.a, dtype=DOUBLE)
        kap = normalize_removal_key(self.kappa_hat)
        kt = np.asarray(self.k_tilde, dtype=DOUBLE)
        v = np.asarray(self.v, dtype=DOUBLE)
        r = np.asarray(self.r, dtype=DOUBLE)
        d_k = w.shape[0]
        for name, vec in (("a", a), ("kappa_hat", kap), ("k_tilde", kt), ("r", r)):
            if vec.shape != (d_k,):
                raise ShapeError(f"{name} must have dim {d_k}, got {vec.shape}")
        if np.any(w <= 0.0) or np.any(w > 1.0):
            raise ValueError("decay w components must lie in (0, 1]")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValueError("learning-rate a components must lie in [0, 1]")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "kappa_hat", kap)
        object.__setattr__(self, "k_tilde", kt)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "r", r)

    @property
    def d_k(self) -> int:
        return self.w.shape[0]

    @property
    def d_v(self) -> int:
        return self.v.shape[0]


@dataclass
class Rwkv7State:
    """Evolving association matrix, shape d_v x d_k, fixed for a layer's lifetime."""

    S: Matrix

    @classmethod
    def zeros(cls, d_v: int, d_k: int, dtype=DOUBLE) -> "Rwkv7State":
        return cls(S=np.zeros((d_v, d_k), dtype=dtype))

    def copy(self) -> "Rwkv7State":
        return Rwkv7State(S=self.S.copy())


def transition_matrix(w: Vector, kappa_hat: Vector, a: Vector) -> Matrix:
    """Materialize M = diag(w) - outer(kappa, a * kappa)."""
    w = np.asarray(w, dtype=DOUBLE)
    kappa_hat = np.asarray(kappa_hat, dtype=DOUBLE)
    a = np.asarray(a, dtype=DOUBLE)
    if not (w.shape == kappa_hat.shape == a.shape):
        raise ShapeError("w, kappa_hat, a must share one dimension")
    return np.diag(w) - np.outer(kappa_hat, a * kappa_hat)


def step_state_raw(S: Matrix, w, a, kappa_hat, k_tilde, v) -> Matrix:
    """One recurrence step without materializing M.

    S @ M = S * w - (S @ kappa) outer (a * kappa), which is what the decode
    and prefill hot loops use; `state_step` wraps this with validation.
    """
    removed = np.outer(S @ kappa_hat, a * kappa_hat)
    return S * w - removed + np.outer(v, k_tilde)


def state_step(prev: Rwkv7State, inputs: Rwkv7Inputs) -> Rwkv7State:
    """Apply one token's transition to the state."""
    d_v, d_k = prev.S.shape
    if inputs.d_k != d_k:
        raise ShapeError(f"inputs have d_k={inputs.d_k}, state expects {d_k}")
    if inputs.d_v != d_v:
        raise ShapeError(f"inputs have d_v={inputs.d_v}, state expects {d_v}")
    S = step_state_raw(
        prev.S, inputs.w, inputs.a, inputs.kappa_hat, inputs.k_tilde, inputs.v
    )
    return Rwkv7State(S=S)


def readout(state: Rwkv7State, r: Vector) -> Vector:
    """Project the state through the receptance: y = S @ r."""
    r = np.asarray(r, dtype=state.S.dtype)
    if r.shape != (state.S.shape[1],):
        raise ShapeError(f"receptance dim {r.shape} does not match state {state.S.shape}")
    return state.S @ r


def rwkv7_stream(
    seq: Iterable[Rwkv7Inputs], state: Rwkv7State
) -> Iterator[Vector]:
    """Yield per-token readouts while mutating ``state`` in place.

    Memory use is independent of sequence length: only the state matrix and
    one step's temporaries are alive at a time.
    """
    for inputs in seq:
        state.S = step_state_raw(
            state.S, inputs.w, inputs.a, inputs.kappa_hat, inputs.k_tilde, inputs.v
        )
        yield readout(state, inputs.r)


def rwkv7_forward(
    seq: list[Rwkv7Inputs], state_init: Rwkv7State
) -> tuple[list[Vector], Rwkv7State]:
    """Run the recurrence over a full sequence, returning all readouts."""
    if not seq:
        raise EmptyInputError("rwkv7_forward needs a nonempty sequence")
    state = state_init.copy()
    outputs = list(rwkv7_stream(seq, state))
    return outputs, state
