"""Deterministic float64 numerical kernels.

LSTM cell forward/backward (gate order i, f, g, o; no peepholes, no
forget-gate bias offset), max-subtracted softmax and cross-entropy over
hidden-state sequences, bias-corrected Adam, a central finite-difference
gradient checker, and the versioned model checkpoint container.

Everything is numpy binary64 and single-threaded: identical inputs give
bitwise-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

GATE_ORDER = "ifgo"


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    """Max-subtracted softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 1:
        raise ContractError("softmax needs at least one logit")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class LstmParams:
    """Gate weights with rows stacked in i, f, g, o order.

    w_x: (4H, E) input weights, w_h: (4H, H) recurrent weights, b: (4H,).
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h4, e = self.w_x.shape
        if h4 % 4 != 0 or self.w_h.shape != (h4, h4 // 4) or self.b.shape != (h4,):
            raise ContractError(
                f"inconsistent LSTM shapes: w_x {self.w_x.shape}, "
                f"w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_x.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def copy(self) -> "LstmParams":
        return LstmParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


def zero_state(hidden_size: int) -> LstmState:
    return LstmState(np.zeros(hidden_size), np.zeros(hidden_size))


def init_lstm_params(input_size: int, hidden_size: int, rng) -> LstmParams:
    """uniform(-1/sqrt(H), 1/sqrt(H)) for all weights and biases."""
    s = 1.0 / np.sqrt(hidden_size)
    return LstmParams(
        w_x=rng.uniform(-s, s, size=(4 * hidden_size, input_size)),
        w_h=rng.uniform(-s, s, size=(4 * hidden_size, hidden_size)),
        b=rng.uniform(-s, s, size=4 * hidden_size),
    )


def _gates(params: LstmParams, x, h_prev):
    h = params.hidden_size
    pre = params.w_x @ x + params.w_h @ h_prev + params.b
    i = sigmoid(pre[:h])
    f = sigmoid(pre[h:2 * h])
    g = np.tanh(pre[2 * h:3 * h])
    o = sigmoid(pre[3 * h:])
    return i, f, g, o


def lstm_step(params: LstmParams, x, state: LstmState, clip: float | None = None) -> LstmState:
    """One LSTM step: c' = f*c + i*g, h' = o*tanh(c').

    With `clip` set, c' and h' are clamped into [-clip, clip] before being
    carried (the saturation-probe option).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_size,):
        raise ContractError(f"input shape {x.shape} != ({params.input_size},)")
    if state.h.shape != (params.hidden_size,) or state.c.shape != (params.hidden_size,):
        raise ContractError("state shape does not match hidden size")
    i, f, g, o = _gates(params, x, state.h)
    c = f * state.c + i * g
    if clip is not None:
        c = np.clip(c, -clip, clip)
    h = o * np.tanh(c)
    if clip is not None:
        h = np.clip(h, -clip, clip)
    return LstmState(h=h, c=c)


@dataclass
class LstmCache:
    """Per-step intermediates recorded by lstm_forward for the backward pass."""

    inputs: np.ndarray       # (T, E)
    gates: np.ndarray        # (T, 4H) post-activation, i|f|g|o blocks
    c_raw: np.ndarray        # (T, H) cell before clipping
    c: np.ndarray            # (T, H) carried cell (clipped if clip set)
    h_raw: np.ndarray        # (T, H) o*tanh(c) before clipping
    h: np.ndarray            # (T, H) carried hidden
    h_prev0: np.ndarray      # (H,) initial hidden
    c_prev0: np.ndarray      # (H,) initial cell
    clip: float | None


def lstm_forward(params: LstmParams, inputs, state0: LstmState | None = None,
                 clip: float | None = None) -> tuple[np.ndarray, np.ndarray, LstmCache]:
    """Run the cell over a (T, E) input sequence; returns (hs, cs, cache)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.input_size:
        raise ContractError(f"inputs shape {inputs.shape} incompatible with E={params.input_size}")
    t_len = inputs.shape[0]
    hsz = params.hidden_size
    if state0 is None:
        state0 = zero_state(hsz)
    gates = np.empty((t_len, 4 * hsz))
    c_raw = np.empty((t_len, hsz))
    cs = np.empty((t_len, hsz))
    h_raw = np.empty((t_len, hsz))
    hs = np.empty((t_len, hsz))
    h_prev, c_prev = state0.h, state0.c
    for t in range(t_len):
        i, f, g, o = _gates(params, inputs[t], h_prev)
        gates[t, :hsz] = i
        gates[t, hsz:2 * hsz] = f
        gates[t, 2 * hsz:3 * hsz] = g
        gates[t, 3 * hsz:] = o
        c = f * c_prev + i * g
        c_raw[t] = c
        if clip is not None:
            c = np.clip(c, -clip, clip)
        cs[t] = c
        h = o * np.tanh(c)
        h_raw[t] = h
        if clip is not None:
            h = np.clip(h, -clip, clip)
        hs[t] = h
        h_prev, c_prev = h, c
    cache = LstmCache(inputs=inputs, gates=gates, c_raw=c_raw, c=cs,
                      h_raw=h_raw, h=hs, h_prev0=state0.h, c_prev0=state0.c, clip=clip)
    return hs, cs, cache


@dataclass
class LstmGrads:
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray


def lstm_backward(params: LstmParams, cache: LstmCache, d_hs,
                  d_h_final=None, d_c_final=None) -> tuple[LstmGrads, np.ndarray]:
    """Full BPTT given per-step hidden-output gradients d_hs (T, H).

    Returns parameter gradients and d_inputs (T, E). `d_h_final`/`d_c_final`
    add gradient flowing into the last carried state.
    """
    t_len, hsz = cache.h.shape
    d_hs = np.asarray(d_hs, dtype=np.float64)
    if d_hs.shape != (t_len, hsz):
        raise ContractError(f"d_hs shape {d_hs.shape} != {(t_len, hsz)}")
    g_wx = np.zeros_like(params.w_x)
    g_wh = np.zeros_like(params.w_h)
    g_b = np.zeros_like(params.b)
    d_inputs = np.zeros_like(cache.inputs)
    dh_next = np.zeros(hsz) if d_h_final is None else np.asarray(d_h_final, dtype=np.float64)
    dc_next = np.zeros(hsz) if d_c_final is None else np.asarray(d_c_final, dtype=np.float64)
    clip = cache.clip
    for t in range(t_len - 1, -1, -1):
        i = cache.gates[t, :hsz]
        f = cache.gates[t, hsz:2 * hsz]
        g = cache.gates[t, 2 * hsz:3 * hsz]
        o = cache.gates[t, 3 * hsz:]
        c = cache.c[t]
        c_prev = cache.c[t - 1] if t > 0 else cache.c_prev0
        h_prev = cache.h[t - 1] if t > 0 else cache.h_prev0
        dh = d_hs[t] + dh_next
        if clip is not None:
            dh = dh * (np.abs(cache.h_raw[t]) < clip)
        tanh_c = np.tanh(c)
        d_o = dh * tanh_c
        dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
        if clip is not None:
            dc = dc * (np.abs(cache.c_raw[t]) < clip)
        d_i = dc * g
        d_f = dc * c_prev
        d_g = dc * i
        dc_next = dc * f
        d_pre = np.concatenate([
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_g * (1.0 - g * g),
            d_o * o * (1.0 - o),
        ])
        g_wx += np.outer(d_pre, cache.inputs[t])
        g_wh += np.outer(d_pre, h_prev)
        g_b += d_pre
        d_inputs[t] = params.w_x.T @ d_pre
        dh_next = params.w_h.T @ d_pre
    return LstmGrads(w_x=g_wx, w_h=g_wh, b=g_b), d_inputs


def sequence_output_loss(w_out, b_out, hs, targets):
    """Softmax cross-entropy of logits hs @ w_out.T + b_out against targets.

    Returns (mean loss, d_hs, d_w_out, d_b_out, log_probs_of_targets); the
    gradients are of the token-mean loss.
    """
    hs = np.asarray(hs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    t_len = hs.shape[0]
    if t_len < 1 or targets.shape != (t_len,):
        raise ContractError("targets must align with one hidden state per step")
    logits = hs @ w_out.T + b_out
    logp = log_softmax(logits)
    rows = np.arange(t_len)
    target_logp = logp[rows, targets]
    loss = -target_logp.mean()
    d_logits = np.exp(logp)
    d_logits[rows, targets] -= 1.0
    d_logits /= t_len
    d_w_out = d_logits.T @ hs
    d_b_out = d_logits.sum(axis=0)
    d_hs = d_logits @ w_out
    return loss, d_hs, d_w_out, d_b_out, target_logp


@dataclass
class SeqGrads:
    """Gradients of a full-BPTT sequence loss, one field per parameter."""

    lstm: LstmGrads
    w_out: np.ndarray
    b_out: np.ndarray
    inputs: np.ndarray


def seq_loss_and_grads(params: LstmParams, w_out, b_out, inputs, targets,
                       clip: float | None = None) -> tuple[float, SeqGrads]:
    """Token-mean cross-entropy of an embedded sequence plus exact gradients.

    inputs: (T, E) already-embedded vectors; targets: (T,) ids. State starts
    at zero (sentence-level reset); BPTT runs the full sequence.
    """
    hs, _, cache = lstm_forward(params, inputs, clip=clip)
    loss, d_hs, d_w_out, d_b_out, _ = sequence_output_loss(w_out, b_out, hs, targets)
    lstm_grads, d_inputs = lstm_backward(params, cache, d_hs)
    return loss, SeqGrads(lstm=lstm_grads, w_out=d_w_out, b_out=d_b_out, inputs=d_inputs)


@dataclass
class AdamState:
    """Bias-corrected Adam state over a name -> array parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], alpha: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            alpha=alpha, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One in-place Adam step; returns the (mutated) params and state."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    m_corr = 1.0 - b1 ** state.t
    v_corr = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape mismatch for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.alpha * (m / m_corr) / (np.sqrt(v / v_corr) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    """Per-parameter central-difference comparison against analytic gradients."""

    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict[str, float]
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               delta: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Check `grads` against central differences of `loss_fn(params)`.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). `params`
    is perturbed in place and restored, so loss_fn may read it by reference.
    """
    per_param: dict[str, float] = {}
    worst = (0.0, "", ())
    for name, p in params.items():
        analytic = grads[name]
        worst_here = 0.0
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + delta
            loss_plus = loss_fn(params)
            p[idx] = orig - delta
            loss_minus = loss_fn(params)
            p[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * delta)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst_here:
                worst_here = rel
            if rel > worst[0]:
                worst = (rel, name, idx)
            it.iternext()
        per_param[name] = worst_here
    return GradCheckReport(max_rel_error=worst[0], worst_param=worst[1],
                           worst_index=worst[2], per_param=per_param, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Checkpoint container.
#
# Layout (documented here and in the README):
#   line 1: b"LMLAB-CKPT 1\n"
#   line 2: canonical JSON (sorted keys, ASCII) + b"\n" holding:
#           kind, gate_order, config, vocab {tokens, counts},
#           arrays: [[name, [dims...]], ...] in storage order
#   then:   for each listed array, its little-endian float64 values in
#           C (row-major) order, concatenated with no padding.
# Bytes are a pure function of the contents, so identical runs produce
# identical files.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LMLAB-CKPT 1"


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(meta)
    header["kind"] = kind
    header["gate_order"] = GATE_ORDER
    header["arrays"] = [[name, list(a.shape)] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + b"\n")
        fh.write(blob.encode("ascii") + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def checkpoint_kind(path) -> str:
    """Read just the kind tag from a checkpoint header."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != _CKPT_MAGIC:
            raise ParseError(path, 1, f"bad checkpoint magic {magic!r}")
        try:
            header = json.loads(fh.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(path, 2, f"bad checkpoint header: {exc}") from None
    return header["kind"]


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != _CKPT_MAGIC:
            raise ParseError(path, 1, f"bad checkpoint magic {magic!r}")
        try:
            header = json.loads(fh.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(path, 2, f"bad checkpoint header: {exc}") from None
        if header.get("gate_order") != GATE_ORDER:
            raise ParseError(path, 2, f"unsupported gate order {header.get('gate_order')!r}")
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ParseError(path, 2, f"truncated data for array '{name}'")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    kind = header.pop("kind")
    header.pop("arrays")
    header.pop("gate_order")
    return kind, header, arrays
