"""Layer-normalised LSTM with zoneout, stacked with residual skips.

Gate blocks are stacked in the order forget, input, output, candidate. The
preactivation is ``LN(W_h h) + LN(W_x x)``; layer norm runs over all 4h
gate features at once and its offsets act as the gate biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spacepose.diff import ops
from spacepose.diff.node import Node, detach
from spacepose.errors import ConfigError
from spacepose.nn import Module

GATES = ("f", "i", "o", "g")


@dataclass(frozen=True)
class ZoneoutConfig:
    cell: float = 0.15
    hidden: float = 0.15

    def __post_init__(self):
        if not (0.0 <= self.cell < 1.0 and 0.0 <= self.hidden < 1.0):
            raise ConfigError("zoneout probabilities must lie in [0, 1)")


class LstmLayer(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float32, forget_offset: float = 1.0):
        super().__init__()
        self.d_in, self.hidden = d_in, hidden
        h4 = 4 * hidden
        self.wx = self.param("wx", (rng.normal(size=(h4, d_in)) / np.sqrt(d_in)).astype(dtype))
        self.wh = self.param("wh", (rng.normal(size=(h4, hidden)) / np.sqrt(hidden)).astype(dtype))
        beta1 = np.zeros(h4, dtype=dtype)
        beta1[:hidden] = forget_offset
        self.gamma1 = self.param("ln_h_gamma", np.ones(h4, dtype=dtype))
        self.beta1 = self.param("ln_h_beta", beta1)
        self.gamma2 = self.param("ln_x_gamma", np.ones(h4, dtype=dtype))
        self.beta2 = self.param("ln_x_beta", np.zeros(h4, dtype=dtype))
        self.gamma3 = self.param("ln_c_gamma", np.ones(hidden, dtype=dtype))
        self.beta3 = self.param("ln_c_beta", np.zeros(hidden, dtype=dtype))


def lstm_gates(layer: LstmLayer, x: Node, h_prev: Node, bypass_ln: bool = False) -> tuple[Node, Node, Node, Node]:
    """Forget, input, output and candidate activations for one step."""
    hid = layer.hidden
    rec = ops.linear(h_prev, ops.transpose(layer.wh))
    inp = ops.linear(x, ops.transpose(layer.wx))
    if bypass_ln:
        pre = rec + inp
    else:
        pre = ops.layer_norm(rec, layer.gamma1, layer.beta1) + ops.layer_norm(inp, layer.gamma2, layer.beta2)
    return (ops.sigmoid(pre[:, 0:hid]), ops.sigmoid(pre[:, hid:2 * hid]), ops.sigmoid(pre[:, 2 * hid:3 * hid]),
            ops.tanh(pre[:, 3 * hid:4 * hid]))


def lstm_cell_step(layer: LstmLayer, x: Node, h_prev: Node, c_prev: Node, masks=None, mode: str = "train",
                   zoneout: ZoneoutConfig = ZoneoutConfig(), bypass_ln: bool = False) -> tuple[Node, Node]:
    """One time step. ``masks`` is ``(d_c, d_h)`` with 1 meaning "keep the previous value".

    Train mode uses the given masks (``None`` means no zoneout); infer mode
    takes the expectation, blending with weights ``zoneout.cell`` and
    ``zoneout.hidden``. ``bypass_ln`` skips all three layer norms.
    """
    hid = layer.hidden
    if x.shape[-1] != layer.d_in or h_prev.shape[-1] != hid or c_prev.shape[-1] != hid:
        raise ConfigError(f"lstm dims: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs layer "
                          f"({layer.d_in} -> {hid})")
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "infer" and masks is not None:
        raise ConfigError("zoneout masks are not accepted in infer mode")

    f, i, o, g = lstm_gates(layer, x, h_prev, bypass_ln)
    c_new = f * c_prev + i * g
    c_out = c_new if bypass_ln else ops.layer_norm(c_new, layer.gamma3, layer.beta3)
    h_new = o * ops.tanh(c_out)

    if mode == "infer":
        zc, zh = zoneout.cell, zoneout.hidden
        if zc == 0 and zh == 0:
            return h_new, c_new
        return (ops.scale(h_prev, zh) + ops.scale(h_new, 1.0 - zh),
                ops.scale(c_prev, zc) + ops.scale(c_new, 1.0 - zc))
    if masks is None:
        return h_new, c_new
    d_c, d_h = (np.asarray(m, dtype=x.dtype) for m in masks)
    if d_c.shape[-1] != hid or d_h.shape[-1] != hid:
        raise ConfigError("zoneout mask width must equal the hidden size")
    c = c_prev * d_c + c_new * (1.0 - d_c)
    h = h_prev * d_h + h_new * (1.0 - d_h)
    return h, c


@dataclass
class RecurrentState:
    h: list[Node]
    c: list[Node]
    state_id: int | None = None

    @classmethod
    def zeros(cls, layers: int, batch: int, hidden: int, dtype=np.float32) -> "RecurrentState":
        return cls([Node(np.zeros((batch, hidden), dtype)) for _ in range(layers)],
                   [Node(np.zeros((batch, hidden), dtype)) for _ in range(layers)])

    def values(self) -> list[np.ndarray]:
        return [n.value for n in self.h] + [n.value for n in self.c]


def detach_state(state: RecurrentState) -> RecurrentState:
    return RecurrentState([detach(n) for n in state.h], [detach(n) for n in state.c], state.state_id)


class RecurrentStack(Module):
    """Input projection to the hidden size followed by L residual LSTM layers."""

    def __init__(self, d_in: int, hidden: int, layers: int, rng, dtype=np.float32):
        super().__init__()
        if layers < 1:
            raise ConfigError("need at least one LSTM layer")
        self.hidden = hidden
        self.proj_w = self.param("proj_weight", (rng.normal(size=(d_in, hidden)) / np.sqrt(d_in)).astype(dtype))
        self.proj_b = self.param("proj_bias", np.zeros(hidden, dtype=dtype))
        self.layers = [self.child(f"lstm{i}", LstmLayer(hidden, hidden, rng.child(i), dtype)) for i in range(layers)]

    def zero_state(self, batch: int, dtype=np.float32) -> RecurrentState:
        return RecurrentState.zeros(len(self.layers), batch, self.hidden, dtype)


def stacked_forward(stack: RecurrentStack, features: list[Node], state: RecurrentState,
                    zoneout: ZoneoutConfig = ZoneoutConfig(), rng=None, mode: str = "train",
                    export_step: int | None = None) -> tuple[list[Node], RecurrentState, RecurrentState | None]:
    """Run the stack over ``features`` (one [N, D] node per time step).

    Returns the per-step outputs, the state after the last step and, if
    ``export_step`` is given, the state after that many steps (for carrying
    into an overlapping next window).
    """
    if len(state.h) != len(stack.layers) or any(h.shape[-1] != stack.hidden for h in state.h):
        raise ConfigError("recurrent state does not match the stack's layers or hidden size")
    if mode == "train" and rng is None and (zoneout.cell > 0 or zoneout.hidden > 0):
        raise ConfigError("train-mode zoneout needs an rng")
    hs, cs = list(state.h), list(state.c)
    outputs, exported = [], None
    for t, x in enumerate(features):
        u = ops.linear(x, stack.proj_w, stack.proj_b)
        for li, layer in enumerate(stack.layers):
            masks = None
            if mode == "train" and (zoneout.cell > 0 or zoneout.hidden > 0):
                step_rng = rng.child(t, li)
                shape = (u.shape[0], stack.hidden)
                masks = (step_rng.bernoulli(zoneout.cell, shape), step_rng.child(1).bernoulli(zoneout.hidden, shape))
            hs[li], cs[li] = lstm_cell_step(layer, u, hs[li], cs[li], masks, mode, zoneout)
            u = hs[li] + u
        outputs.append(u)
        if export_step is not None and t + 1 == export_step:
            exported = RecurrentState(list(hs), list(cs))
    return outputs, RecurrentState(hs, cs), exported
