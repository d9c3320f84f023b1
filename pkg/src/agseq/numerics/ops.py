"""Differentiable operations.

Every op takes Vars (plus plain ndarrays for non-differentiable constants
such as masks and token ids), computes the forward value, and records one
backward closure on the tape. Vector signatures follow the single-example
shapes; most ops also accept a leading batch axis, which is the layout the
trainer uses.

Shape conventions: B batch, N source positions, H hidden, E embedding,
V vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, InvalidInputError
from .tape import Tape, Var

LOG_EPS = 1e-12


def _tape_of(*vars_) -> Tape | None:
    tape = None
    for v in vars_:
        if isinstance(v, Var) and v.tape is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ConfigurationError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ConfigurationError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
    tape = _tape_of(a, b)
    out = Var(a.value + b.value, tape)
    if tape is not None:
        def bwd():
            a.grad += out.grad
            b.grad += out.grad
        tape.record(bwd)
    return out


def add_const(x: Var, c: np.ndarray) -> Var:
    tape = x.tape
    out = Var(x.value + c, tape)
    if tape is not None:
        def bwd():
            x.grad += out.grad
        tape.record(bwd)
    return out


def scale(x: Var, c: float) -> Var:
    tape = x.tape
    out = Var(x.value * c, tape)
    if tape is not None:
        def bwd():
            x.grad += c * out.grad
        tape.record(bwd)
    return out


def mul_const(x: Var, c: np.ndarray) -> Var:
    """Elementwise product with a constant array (broadcastable onto x)."""
    tape = x.tape
    out = Var(x.value * c, tape)
    if tape is not None:
        def bwd():
            x.grad += c * out.grad
        tape.record(bwd)
    return out


def elementwise_mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ConfigurationError(
            f"elementwise_mul shapes differ: {a.value.shape} vs {b.value.shape}"
        )
    tape = _tape_of(a, b)
    out = Var(a.value * b.value, tape)
    if tape is not None:
        def bwd():
            a.grad += out.grad * b.value
            b.grad += out.grad * a.value
        tape.record(bwd)
    return out


def relu(x: Var) -> Var:
    tape = x.tape
    out = Var(np.maximum(x.value, 0.0), tape)
    if tape is not None:
        active = x.value > 0.0  # subgradient at 0 is 0
        def bwd():
            x.grad += out.grad * active
        tape.record(bwd)
    return out


def sigmoid(x: Var) -> Var:
    v = x.value
    val = np.empty_like(v)
    pos = v >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    val[~pos] = ex / (1.0 + ex)
    tape = x.tape
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            x.grad += out.grad * val * (1.0 - val)
        tape.record(bwd)
    return out


def tanh(x: Var) -> Var:
    val = np.tanh(x.value)
    tape = x.tape
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            x.grad += out.grad * (1.0 - val * val)
        tape.record(bwd)
    return out


def gate_blend(z: Var, h: Var, h_new: Var) -> Var:
    """(1 - z) * h + z * h_new, the GRU state interpolation."""
    tape = _tape_of(z, h, h_new)
    out = Var((1.0 - z.value) * h.value + z.value * h_new.value, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            z.grad += g * (h_new.value - h.value)
            h.grad += g * (1.0 - z.value)
            h_new.grad += g * z.value
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# Linear / shape
# ---------------------------------------------------------------------------


def affine(w: Var, x: Var, b: Var | None = None) -> Var:
    """y = W @ x (+ b). x may be a vector (n,) or a batch (B, n)."""
    m, n = w.value.shape
    if x.value.shape[-1] != n:
        raise ConfigurationError(
            f"affine shape mismatch: W is {w.value.shape}, x is {x.value.shape}"
        )
    if b is not None and b.value.shape != (m,):
        raise ConfigurationError(
            f"affine bias shape {b.value.shape} does not match W {w.value.shape}"
        )
    batched = x.value.ndim == 2
    val = x.value @ w.value.T if batched else w.value @ x.value
    if b is not None:
        val = val + b.value
    tape = _tape_of(w, x, b)
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            if batched:
                w.grad += g.T @ x.value
                x.grad += g @ w.value
                if b is not None:
                    b.grad += g.sum(axis=0)
            else:
                w.grad += np.outer(g, x.value)
                x.grad += w.value.T @ g
                if b is not None:
                    b.grad += g
        tape.record(bwd)
    return out


def concat(a: Var, b: Var) -> Var:
    """Concatenate along the last axis; backward splits the gradient."""
    tape = _tape_of(a, b)
    out = Var(np.concatenate([a.value, b.value], axis=-1), tape)
    if tape is not None:
        p = a.value.shape[-1]
        def bwd():
            a.grad += out.grad[..., :p]
            b.grad += out.grad[..., p:]
        tape.record(bwd)
    return out


def vdot(a: Var, b: Var) -> Var:
    """Inner product of two equal-length vectors; scalar output."""
    if a.value.shape != b.value.shape or a.value.ndim != 1:
        raise ConfigurationError(
            f"vdot needs equal-length vectors, got {a.value.shape} and {b.value.shape}"
        )
    tape = _tape_of(a, b)
    out = Var(a.value @ b.value, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            a.grad += g * b.value
            b.grad += g * a.value
        tape.record(bwd)
    return out


def embedding(table: Var, ids: np.ndarray) -> Var:
    """Row lookup: ids (B,) int -> (B, E). Backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise InvalidInputError(
            f"embedding id out of range [0, {table.value.shape[0]}): {ids}"
        )
    tape = table.tape
    out = Var(table.value[ids], tape)
    if tape is not None:
        def bwd():
            np.add.at(table.grad, ids, out.grad)
        tape.record(bwd)
    return out


def stack_steps(items: list[Var]) -> Var:
    """Stack per-step (B, H) states into (B, N, H)."""
    tape = _tape_of(*items)
    out = Var(np.stack([v.value for v in items], axis=1), tape)
    if tape is not None:
        def bwd():
            for i, v in enumerate(items):
                v.grad += out.grad[:, i, :]
        tape.record(bwd)
    return out


def where_rows(keep: np.ndarray, a: Var, b: Var) -> Var:
    """Per-row select: keep[i] ? a[i] : b[i]. keep is a (B,) bool constant."""
    sel = keep[:, None]
    tape = _tape_of(a, b)
    out = Var(np.where(sel, a.value, b.value), tape)
    if tape is not None:
        def bwd():
            a.grad += out.grad * sel
            b.grad += out.grad * ~sel
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# Softmax family and losses
# ---------------------------------------------------------------------------


def masked_softmax(scores: Var, valid_mask: np.ndarray) -> Var:
    """Softmax over the last axis with hard zeros at masked positions.

    Masked entries are excluded before exponentiation; valid entries use
    max-subtraction, so the result is shift invariant and never NaN.
    """
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != scores.value.shape:
        raise ConfigurationError(
            f"mask shape {mask.shape} does not match scores {scores.value.shape}"
        )
    if not mask.any(axis=-1).all():
        raise InvalidInputError("masked_softmax: a row has no valid positions")
    s = scores.value
    smax = np.max(np.where(mask, s, -np.inf), axis=-1, keepdims=True)
    e = np.exp(np.where(mask, s - smax, 0.0)) * mask
    val = e / e.sum(axis=-1, keepdims=True)
    tape = scores.tape
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            dot = (g * val).sum(axis=-1, keepdims=True)
            scores.grad += val * (g - dot)
        tape.record(bwd)
    return out


def log_softmax(z: Var) -> Var:
    """Stable log-softmax over the last axis."""
    s = z.value
    smax = s.max(axis=-1, keepdims=True)
    shifted = s - smax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    val = shifted - lse
    tape = z.tape
    out = Var(val, tape)
    if tape is not None:
        softmax = np.exp(val)
        def bwd():
            g = out.grad
            z.grad += g - softmax * g.sum(axis=-1, keepdims=True)
        tape.record(bwd)
    return out


def nll_loss(log_probs: Var, target: int) -> Var:
    """-log_probs[target] for a single log-distribution vector."""
    v = log_probs.value
    if v.ndim != 1:
        raise ConfigurationError(f"nll_loss expects a vector, got shape {v.shape}")
    if not 0 <= target < v.shape[0]:
        raise InvalidInputError(f"nll_loss target {target} out of range [0, {v.shape[0]})")
    tape = log_probs.tape
    out = Var(-v[target], tape)
    if tape is not None:
        def bwd():
            log_probs.grad[target] -= out.grad
        tape.record(bwd)
    return out


def gathered_nll(log_probs: Var, targets: np.ndarray, valid: np.ndarray) -> Var:
    """Per-row NLL: out[b] = -log_probs[b, targets[b]] where valid, else 0."""
    targets = np.asarray(targets)
    valid = np.asarray(valid, dtype=bool)
    b_idx = np.arange(log_probs.value.shape[0])
    safe = np.where(valid, targets, 0)
    val = np.where(valid, -log_probs.value[b_idx, safe], 0.0)
    tape = log_probs.tape
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            log_probs.grad[b_idx, safe] -= out.grad * valid
        tape.record(bwd)
    return out


def gathered_neg_log(probs: Var, targets: np.ndarray, valid: np.ndarray) -> Var:
    """Per-row -log(p[b, targets[b]]), clamped at LOG_EPS before the log."""
    targets = np.asarray(targets)
    valid = np.asarray(valid, dtype=bool)
    b_idx = np.arange(probs.value.shape[0])
    safe = np.where(valid, targets, 0)
    picked = probs.value[b_idx, safe]
    clamped = np.maximum(picked, LOG_EPS)
    val = np.where(valid, -np.log(clamped), 0.0)
    tape = probs.tape
    out = Var(val, tape)
    if tape is not None:
        live = valid & (picked > LOG_EPS)  # clamped region has zero slope
        def bwd():
            probs.grad[b_idx, safe] -= np.where(live, out.grad / clamped, 0.0)
        tape.record(bwd)
    return out


def mean_all(x: Var) -> Var:
    tape = x.tape
    out = Var(x.value.mean(), tape)
    if tape is not None:
        inv = 1.0 / x.value.size
        def bwd():
            x.grad += out.grad * inv
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# Attention kernels
# ---------------------------------------------------------------------------


def weighted_sum(weights: Var | np.ndarray, states: Var) -> Var:
    """Context vector: sum_i weights[..., i] * states[..., i, :].

    weights (N,) with states (N, H), or (B, N) with (B, N, H). A plain
    ndarray of weights is treated as a constant (oracle substitution).
    """
    w = weights.value if isinstance(weights, Var) else np.asarray(weights, dtype=np.float64)
    s = states.value
    if w.shape != s.shape[:-1]:
        raise ConfigurationError(
            f"weighted_sum: weights {w.shape} do not match states {s.shape}"
        )
    batched = s.ndim == 3
    val = np.einsum("bn,bnh->bh", w, s) if batched else w @ s
    tape = _tape_of(weights, states) if isinstance(weights, Var) else states.tape
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            if batched:
                states.grad += w[:, :, None] * g[:, None, :]
                if isinstance(weights, Var):
                    weights.grad += np.einsum("bnh,bh->bn", s, g)
            else:
                states.grad += np.outer(w, g)
                if isinstance(weights, Var):
                    weights.grad += s @ g
        tape.record(bwd)
    return out


def dot_scores(states: Var, query: Var) -> Var:
    """Alignment scores by inner product: (N,H)x(H,)->(N,) or batched."""
    s, q = states.value, query.value
    if s.shape[-1] != q.shape[-1]:
        raise ConfigurationError(
            f"dot_scores: state dim {s.shape} vs query dim {q.shape}"
        )
    batched = s.ndim == 3
    val = np.einsum("bnh,bh->bn", s, q) if batched else s @ q
    tape = _tape_of(states, query)
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            if batched:
                states.grad += g[:, :, None] * q[:, None, :]
                query.grad += np.einsum("bnh,bn->bh", s, g)
            else:
                states.grad += np.outer(g, q)
                query.grad += s.T @ g
        tape.record(bwd)
    return out


def attn_keys(w_c: Var, states: Var) -> Var:
    """Precompute the encoder-side half of the score MLP.

    keys = states @ W_c[:, :H].T, so a per-step score only needs the
    query-side half. W_c is the full (H, 2H) matrix; gradients land in its
    left column block.
    """
    h = w_c.value.shape[0]
    if w_c.value.shape != (h, 2 * h) or states.value.shape[-1] != h:
        raise ConfigurationError(
            f"attn_keys: W_c {w_c.value.shape} incompatible with states {states.value.shape}"
        )
    w_left = w_c.value[:, :h]
    s = states.value
    flat = s.reshape(-1, h)
    val = (flat @ w_left.T).reshape(s.shape)
    tape = _tape_of(w_c, states)
    out = Var(val, tape)
    if tape is not None:
        def bwd():
            g = out.grad.reshape(-1, h)
            w_c.grad[:, :h] += g.T @ flat
            states.grad += (g @ w_left).reshape(s.shape)
        tape.record(bwd)
    return out


def mlp_scores_from_keys(keys: Var, w_c: Var, w_s: Var, query: Var) -> Var:
    """Score MLP evaluated at every source position for one query state.

    score[..., i] = w_s . ReLU(keys[..., i, :] + W_c[:, H:] @ query).
    keys (N,H) with query (H,), or keys (B,N,H) with query (B,H).
    """
    h = w_c.value.shape[0]
    w_right = w_c.value[:, h:]
    batched = keys.value.ndim == 3
    if batched:
        q = query.value @ w_right.T            # (B, H)
        pre = keys.value + q[:, None, :]       # (B, N, H)
    else:
        q = w_right @ query.value              # (H,)
        pre = keys.value + q[None, :]          # (N, H)
    r = np.maximum(pre, 0.0)
    val = r @ w_s.value
    tape = _tape_of(keys, w_c, w_s, query)
    out = Var(val, tape)
    if tape is not None:
        active = pre > 0.0
        def bwd():
            g = out.grad
            dr = g[..., None] * w_s.value
            w_s.grad += np.einsum("...nh,...n->h", r, g)
            dpre = dr * active
            keys.grad += dpre
            dq = dpre.sum(axis=-2)
            if batched:
                w_c.grad[:, h:] += dq.T @ query.value
                query.grad += dq @ w_right
            else:
                w_c.grad[:, h:] += np.outer(dq, query.value)
                query.grad += w_right.T @ dq
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# Recurrence
# ---------------------------------------------------------------------------


@dataclass
class GruGates:
    """Parameter views for one GRU cell (update z, reset r, candidate h)."""

    w_z: Var
    u_z: Var
    b_z: Var
    w_r: Var
    u_r: Var
    b_r: Var
    w_h: Var
    u_h: Var
    b_h: Var


def gru_cell(x: Var, h_prev: Var, gates: GruGates) -> Var:
    """One GRU step.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * h~
    """
    z = sigmoid(add(affine(gates.w_z, x, gates.b_z), affine(gates.u_z, h_prev)))
    r = sigmoid(add(affine(gates.w_r, x, gates.b_r), affine(gates.u_r, h_prev)))
    h_cand = tanh(
        add(affine(gates.w_h, x, gates.b_h), affine(gates.u_h, elementwise_mul(r, h_prev)))
    )
    return gate_blend(z, h_prev, h_cand)


# ---------------------------------------------------------------------------
# Stochastic relaxation
# ---------------------------------------------------------------------------


def gumbel_softmax(
    logits: Var,
    temperature: float,
    rng: np.random.Generator,
    valid_mask: np.ndarray | None = None,
) -> Var:
    """softmax((logits + Gumbel noise) / temperature); a peaked sample on
    the simplex that is differentiable through the logits."""
    if temperature <= 0:
        raise ConfigurationError(f"gumbel_softmax temperature must be > 0, got {temperature}")
    if valid_mask is None:
        valid_mask = np.ones(logits.value.shape, dtype=bool)
    noise = rng.gumbel(size=logits.value.shape)
    return masked_softmax(scale(add_const(logits, noise), 1.0 / temperature), valid_mask)
