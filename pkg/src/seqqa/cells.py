"""GRU and LSTM cells, sequence runners and the bidirectional wrapper.

Inputs may be a single vector ``(I,)`` or a batch ``(B, I)``; hidden states
follow the same leading shape.  Runners accept an optional ``(T, B)`` mask so
padded positions leave the state untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class EmptySequenceError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


@dataclass
class LstmParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1]


@dataclass
class RnnState:
    h: Tensor
    c: Tensor | None = None


def param_shapes(kind: str, input_size: int, hidden_size: int) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in) for one cell."""
    cls = GruParams if kind == "gru" else LstmParams
    out = {}
    for f in fields(cls):
        if f.name.startswith("W"):
            out[f.name] = ((hidden_size, input_size), input_size)
        elif f.name.startswith("U"):
            out[f.name] = ((hidden_size, hidden_size), hidden_size)
        else:
            out[f.name] = ((hidden_size,), hidden_size)
    return out


def _check(x: Tensor, h: Tensor, input_size: int, hidden_size: int, who: str) -> None:
    if x.shape[-1] != input_size or h.shape[-1] != hidden_size or x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(
            f"{who}: input {x.shape} / state {h.shape} do not fit cell "
            f"(input {input_size}, hidden {hidden_size})"
        )


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    _check(x, h_prev, p.input_size, p.hidden_size, "gru_step")
    z = T.sigmoid(T.linear(x, p.W_z, p.b_z) + T.linear(h_prev, p.U_z))
    r = T.sigmoid(T.linear(x, p.W_r, p.b_r) + T.linear(h_prev, p.U_r))
    cand = T.tanh(T.linear(x, p.W_h, p.b_h) + T.linear(r * h_prev, p.U_h))
    return h_prev + z * (cand - h_prev)


def lstm_step(x: Tensor, state: RnnState, p: LstmParams) -> RnnState:
    h, c = state.h, state.c
    _check(x, h, p.input_size, p.hidden_size, "lstm_step")
    if c is None or c.shape != h.shape:
        raise DimensionError("lstm_step: state needs a cell vector shaped like h")
    i = T.sigmoid(T.linear(x, p.W_i, p.b_i) + T.linear(h, p.U_i))
    f = T.sigmoid(T.linear(x, p.W_f, p.b_f) + T.linear(h, p.U_f))
    o = T.sigmoid(T.linear(x, p.W_o, p.b_o) + T.linear(h, p.U_o))
    g = T.tanh(T.linear(x, p.W_g, p.b_g) + T.linear(h, p.U_g))
    c_new = f * c + i * g
    return RnnState(o * T.tanh(c_new), c_new)


class Cell:
    """A step function bound to its parameters."""

    def __init__(self, params: GruParams | LstmParams):
        self.params = params
        self.kind = "gru" if isinstance(params, GruParams) else "lstm"

    @property
    def hidden_size(self) -> int:
        return self.params.hidden_size

    @property
    def input_size(self) -> int:
        return self.params.input_size

    def zero_state(self, batch_shape: tuple[int, ...] = ()) -> RnnState:
        z = np.zeros(batch_shape + (self.hidden_size,))
        return RnnState(Tensor(z), Tensor(z.copy()) if self.kind == "lstm" else None)

    def step(self, x: Tensor, state: RnnState) -> RnnState:
        if self.kind == "gru":
            return RnnState(gru_step(x, state.h, self.params))
        return lstm_step(x, state, self.params)


def _blend(new: RnnState, old: RnnState, keep: np.ndarray) -> RnnState:
    # keep is (B, 1): 1 where the step is real, 0 on padding
    m = Tensor(keep)
    h = old.h + m * (new.h - old.h)
    c = None if new.c is None else old.c + m * (new.c - old.c)
    return RnnState(h, c)


def run_sequence(
    inputs: Sequence[Tensor],
    cell: Cell,
    initial: RnnState | None = None,
    direction: str = "forward",
    mask: np.ndarray | None = None,
) -> tuple[list[Tensor], RnnState]:
    """Unroll ``cell`` over ``inputs``.

    Outputs are returned in original position order whichever way the
    sequence is traversed.  ``mask[t]`` (shape ``(B,)``) marks real steps; a
    masked step passes the previous state through unchanged.
    """
    if len(inputs) == 0:
        raise EmptySequenceError("run_sequence: empty input sequence")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    state = initial if initial is not None else cell.zero_state(inputs[0].shape[:-1])
    order = range(len(inputs)) if direction == "forward" else range(len(inputs) - 1, -1, -1)
    outputs: list[Tensor | None] = [None] * len(inputs)
    for t in order:
        new = cell.step(inputs[t], state)
        if mask is not None and not mask[t].all():
            new = _blend(new, state, np.asarray(mask[t], dtype=float)[:, None])
        state = new
        outputs[t] = state.h
    return outputs, state


def run_bidirectional(
    inputs: Sequence[Tensor],
    fwd_cell: Cell,
    bwd_cell: Cell,
    mask: np.ndarray | None = None,
) -> tuple[list[Tensor], RnnState, RnnState]:
    """Forward and backward passes concatenated per step.

    Returns ``(outputs, fwd_final, bwd_final)``; each output has width 2H and
    ``concat(fwd_final.h, bwd_final.h)`` is the joint final state.
    """
    if fwd_cell.hidden_size != bwd_cell.hidden_size:
        raise ConfigurationError(
            f"bidirectional cells disagree on hidden size: "
            f"{fwd_cell.hidden_size} vs {bwd_cell.hidden_size}"
        )
    f_out, f_final = run_sequence(inputs, fwd_cell, direction="forward", mask=mask)
    b_out, b_final = run_sequence(inputs, bwd_cell, direction="backward", mask=mask)
    outputs = [T.concat([f, b], axis=-1) for f, b in zip(f_out, b_out)]
    return outputs, f_final, b_final


def final_concat(fwd_final: RnnState, bwd_final: RnnState) -> Tensor:
    return T.concat([fwd_final.h, bwd_final.h], axis=-1)
