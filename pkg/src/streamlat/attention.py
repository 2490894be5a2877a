"""Attention mechanisms: global scaled-dot / multi-head, plus the two
streaming cross-attention algorithms (monotonic chunkwise and cumulative).

Each streaming mechanism has a training path that marginalizes over all
monotonic halting paths (expectation form) and an inference path that makes
hard halting decisions frame by frame. Frame indices on public surfaces are
1-based: a trigger of ``t`` means the decoder committed after seeing frame
``t``, and a mask bound of ``m`` keeps frames ``1..m`` visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray, DimensionError

# Floor for the halting-probability denominator in the alignment recursion.
ALIGN_CLAMP_FLOOR = 1e-10

# Additive logit value for masked positions in global attention.
MASK_LOGIT = -1e9


class ExhaustedInputError(RuntimeError):
    """Hard-halting scan was asked to start past the final frame."""


# ---------------------------------------------------------------------------
# Global attention


def scaled_dot_attention(q: DiffArray, k: DiffArray, v: DiffArray,
                         mask: Optional[np.ndarray] = None) -> DiffArray:
    """softmax(q kᵀ / sqrt(d_k)) v with an optional boolean visibility mask.

    ``mask`` has shape (queries, keys); False entries get logit -1e9 before
    the softmax.
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"scaled_dot_attention: query dim {q.shape} does not match key dim {k.shape}"
        )
    logits = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        penalty = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_LOGIT)
        logits = dc.add(logits, dc.constant(penalty))
    weights = dc.softmax(logits, axis=-1)
    return dc.matmul(weights, v)


@dataclass
class MultiHeadConfig:
    num_heads: int
    model_dim: int

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise DimensionError(
                f"model_dim {self.model_dim} not divisible by {self.num_heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> DiffArray:
    """Scaled uniform fan-in initialization."""
    bound = 1.0 / math.sqrt(n_in)
    return dc.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))


class MultiHeadAttention:
    """Projected per-head scaled-dot attention, concatenated and re-projected."""

    def __init__(self, cfg: MultiHeadConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.w_q = init_linear(rng, d, d)
        self.w_k = init_linear(rng, d, d)
        self.w_v = init_linear(rng, d, d)
        self.w_o = init_linear(rng, d, d)

    def named_params(self) -> dict[str, DiffArray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    def forward(self, q_in: DiffArray, k_in: DiffArray, v_in: DiffArray,
                mask: Optional[np.ndarray] = None) -> DiffArray:
        cfg = self.cfg
        q = dc.matmul(q_in, self.w_q)
        k = dc.matmul(k_in, self.w_k)
        v = dc.matmul(v_in, self.w_v)
        heads = []
        for h in range(cfg.num_heads):
            cols = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
            heads.append(scaled_dot_attention(q[:, cols], k[:, cols], v[:, cols], mask))
        return dc.matmul(dc.concat(heads, axis=1), self.w_o)


# ---------------------------------------------------------------------------
# Streaming primitives


def monotonic_p(q_i: DiffArray, keys: DiffArray, noise_std: float = 0.0,
                rng: Optional[np.random.Generator] = None,
                training: bool = False) -> DiffArray:
    """Per-frame halting probabilities sigmoid(q kᵀ / sqrt(d_k) [+ noise]).

    Gaussian pre-sigmoid noise is drawn only in training mode; it is a
    constant with respect to gradients.
    """
    if keys.shape[0] == 0:
        raise DimensionError("monotonic_p: empty key sequence")
    d_k = q_i.shape[-1]
    q2 = q_i if q_i.ndim == 2 else dc.reshape(q_i, (1, d_k))
    e = dc.scale(dc.matmul(q2, dc.transpose(keys)), 1.0 / math.sqrt(d_k))
    if training and noise_std > 0.0:
        if rng is None:
            raise ValueError("training-mode noise requires an rng")
        e = dc.add(e, dc.constant(rng.normal(0.0, noise_std, size=e.shape)))
    return dc.reshape(dc.sigmoid(e), (keys.shape[0],))


def _alignment_row_forward(pv: list, av: list, lim: int) -> list:
    """Forward recursion for one decode step, on plain floats."""
    out = [0.0] * len(pv)
    for j in range(lim):
        if j == 0:
            carry = 0.0
        else:
            carry = (1.0 - pv[j - 1]) * out[j - 1] / max(pv[j - 1], ALIGN_CLAMP_FLOOR)
        out[j] = pv[j] * (carry + av[j])
    return out


def _alignment_row_backward(pv: list, av: list, out: list, g, lim: int,
                            gp: np.ndarray) -> np.ndarray:
    """Reverse recursion for one row.

    Accumulates the p-row gradient into ``gp`` and returns the gradient
    flowing into the previous alignment row.
    """
    T = len(pv)
    ga = np.zeros(T)
    carry_grad = 0.0  # gradient reaching alpha[j] from alpha[j+1] within the row
    for j in range(lim - 1, -1, -1):
        total = g[j] + carry_grad
        if j == 0:
            t = 0.0
        else:
            cl = max(pv[j - 1], ALIGN_CLAMP_FLOOR)
            t = (1.0 - pv[j - 1]) * out[j - 1] / cl
        gp[j] += total * (t + av[j])
        ga[j] += total * pv[j]
        if j > 0:
            carry_grad = total * pv[j] * (1.0 - pv[j - 1]) / cl
            # (1-p)/max(p, floor): derivative switches at the clamp
            if pv[j - 1] > ALIGN_CLAMP_FLOOR:
                dfac = -1.0 / (pv[j - 1] * pv[j - 1])
            else:
                dfac = -1.0 / ALIGN_CLAMP_FLOOR
            gp[j - 1] += total * pv[j] * out[j - 1] * dfac
    return ga


def expected_alignment(p: DiffArray, alpha_prev: DiffArray,
                       mask_bound: Optional[int] = None) -> DiffArray:
    """One step of the expected-triggering recursion.

    alpha[j] = p[j] * ((1 - p[j-1]) * alpha[j-1] / max(p[j-1], 1e-10)
               + alpha_prev[j]), with the j-1 terms taken as 0 at the first
    frame. With ``mask_bound = m`` (1-based), alpha is exactly 0 beyond
    frame m. Inputs and output are 1-D rows of equal length.
    """
    if p.shape != alpha_prev.shape or p.ndim != 1:
        raise DimensionError(
            f"expected_alignment: rows disagree, p {p.shape} vs prev {alpha_prev.shape}"
        )
    T = p.shape[0]
    prev_mass = float(alpha_prev.values.sum())
    if prev_mass > 1.0 + 1e-6:
        raise ValueError(f"expected_alignment: previous row mass {prev_mass} exceeds 1")
    lim = T if mask_bound is None else max(0, min(int(mask_bound), T))

    pv = p.values.tolist()
    av = alpha_prev.values.tolist()
    out = np.array(_alignment_row_forward(pv, av, lim))

    def backward(g):
        gp = np.zeros(T)
        ga = _alignment_row_backward(pv, av, out.tolist(), g, lim, gp)
        p.accumulate_grad(gp)
        alpha_prev.accumulate_grad(ga)

    return dc.op_node(out, (p, alpha_prev), backward)


def expected_alignment_matrix(p: DiffArray,
                              mask_bounds: Optional[Sequence[int]] = None
                              ) -> DiffArray:
    """Fused recursion over all decode steps, anchored at [1, 0, ..., 0].

    Equivalent to chaining ``expected_alignment`` row by row; fused into one
    graph node so a whole utterance costs a single op.
    """
    if p.ndim != 2:
        raise DimensionError(f"expected_alignment_matrix: need (steps, frames), got {p.shape}")
    steps, T = p.shape
    if mask_bounds is not None and len(mask_bounds) != steps:
        raise DimensionError(
            f"expected_alignment_matrix: {len(mask_bounds)} bounds vs {steps} steps")
    lims = [T] * steps if mask_bounds is None else [
        max(0, min(int(b), T)) for b in mask_bounds]

    pv = p.values.tolist()
    out = np.zeros((steps, T))
    prev = [0.0] * T
    prev[0] = 1.0
    rows = []
    for i in range(steps):
        row = _alignment_row_forward(pv[i], prev, lims[i])
        rows.append(row)
        prev = row
    out = np.array(rows)

    def backward(g):
        gp = np.zeros((steps, T))
        ga_next = np.zeros(T)
        anchor = [0.0] * T
        anchor[0] = 1.0
        for i in range(steps - 1, -1, -1):
            row_grad = g[i] + ga_next
            prev_row = rows[i - 1] if i > 0 else anchor
            ga_next = _alignment_row_backward(pv[i], prev_row, rows[i],
                                              row_grad, lims[i], gp[i])
        p.accumulate_grad(gp)

    return dc.op_node(out, (p,), backward)


def initial_alignment(num_frames: int) -> DiffArray:
    """Anchor row for the recursion: all mass on the first frame."""
    row = np.zeros(num_frames)
    row[0] = 1.0
    return dc.constant(row)


def _chunk_membership(T: int, w: int) -> np.ndarray:
    # member[k, j]: frame j belongs to the chunk ending at frame k
    rows = np.arange(T)[:, None]
    cols = np.arange(T)[None, :]
    return (cols <= rows) & (cols >= rows - (w - 1))


def chunkwise_beta(alpha: DiffArray, u: DiffArray, w: int) -> DiffArray:
    """Redistribute alignment mass over backward-looking chunks of width w.

    beta[j] = sum_{k=j}^{j+w-1} alpha[k] * exp(u[j]) / sum_{l=k-w+1}^{k}
    exp(u[l]), out-of-range indices contributing nothing. Exponentials are
    shifted by each chunk's max, so every denominator is at least 1.
    """
    if w < 1:
        raise ValueError(f"chunkwise_beta: chunk width must be >= 1, got {w}")
    if alpha.shape != u.shape or alpha.ndim != 1:
        raise DimensionError(
            f"chunkwise_beta: rows disagree, alpha {alpha.shape} vs u {u.shape}"
        )
    T = alpha.shape[0]
    member = _chunk_membership(T, w)
    uv = u.values
    shift = np.where(member, uv[None, :], -np.inf).max(axis=1)  # per-chunk max
    shifted = dc.sub(dc.reshape(u, (1, T)), dc.constant(shift[:, None]))
    exps = dc.mul(dc.exp(shifted), dc.constant(member.astype(np.float64)))
    denom = dc.sum_(exps, axis=1)  # (T,)  >= 1 by construction
    weights = dc.div(alpha, denom)
    beta = dc.matmul(dc.reshape(weights, (1, T)), exps)
    return dc.reshape(beta, (T,))


def chunkwise_beta_matrix(alpha: DiffArray, u: DiffArray, w: int) -> DiffArray:
    """Chunk redistribution for all decode steps at once, (steps, frames)."""
    if w < 1:
        raise ValueError(f"chunkwise_beta_matrix: chunk width must be >= 1, got {w}")
    if alpha.shape != u.shape or alpha.ndim != 2:
        raise DimensionError(
            f"chunkwise_beta_matrix: {alpha.shape} alignment vs {u.shape} energies")
    steps, T = alpha.shape
    member = _chunk_membership(T, w)
    shift = np.where(member[None, :, :], u.values[:, None, :], -np.inf).max(axis=2)
    shifted = dc.sub(dc.reshape(u, (steps, 1, T)), dc.constant(shift[:, :, None]))
    exps = dc.mul(dc.exp(shifted), dc.constant(member.astype(np.float64)))
    denom = dc.sum_(exps, axis=2)  # (steps, T), every entry >= 1
    weights = dc.div(alpha, denom)
    return dc.sum_(dc.mul(dc.reshape(weights, (steps, T, 1)), exps), axis=1)


def mocha_context_train(alpha: DiffArray, u: DiffArray, values: DiffArray,
                        w: int) -> DiffArray:
    """Context vector: chunkwise-redistributed weights times encoder states."""
    if values.shape[0] != alpha.shape[0]:
        raise DimensionError(
            f"mocha_context_train: {alpha.shape[0]} weights vs {values.shape} values"
        )
    beta = chunkwise_beta(alpha, u, w)
    ctx = dc.matmul(dc.reshape(beta, (1, alpha.shape[0])), values)
    return dc.reshape(ctx, (values.shape[1],))


def ca_interim_contexts(a: DiffArray, values: DiffArray) -> DiffArray:
    """Running weighted sums c[j] = c[j-1] + a[j] * v[j], as (frames, dim)."""
    if a.ndim != 1 or a.shape[0] != values.shape[0]:
        raise DimensionError(
            f"ca_interim_contexts: {a.shape} weights vs {values.shape} values"
        )
    weighted = dc.mul(dc.reshape(a, (a.shape[0], 1)), values)
    return dc.cumsum(weighted, axis=0)


def ca_halting_p(interim: DiffArray, selector_w: DiffArray, selector_r: DiffArray,
                 noise_std: float = 0.0, rng: Optional[np.random.Generator] = None,
                 training: bool = False) -> DiffArray:
    """Halting probabilities from interim contexts via a one-layer selector."""
    if interim.shape[1] != selector_w.shape[0]:
        raise DimensionError(
            f"ca_halting_p: context dim {interim.shape} vs selector {selector_w.shape}"
        )
    logits = dc.add(dc.matmul(interim, selector_w), selector_r)
    if training and noise_std > 0.0:
        if rng is None:
            raise ValueError("training-mode noise requires an rng")
        logits = dc.add(logits, dc.constant(rng.normal(0.0, noise_std, size=logits.shape)))
    return dc.reshape(dc.sigmoid(logits), (interim.shape[0],))


def ca_context_train(alpha: DiffArray, interim: DiffArray) -> DiffArray:
    """Expected context: alignment-weighted mix of the interim contexts."""
    if alpha.shape[0] != interim.shape[0]:
        raise DimensionError(
            f"ca_context_train: {alpha.shape[0]} weights vs {interim.shape} contexts"
        )
    ctx = dc.matmul(dc.reshape(alpha, (1, alpha.shape[0])), interim)
    return dc.reshape(ctx, (interim.shape[1],))


def _scan_trigger(p_row: np.ndarray, start_frame: int) -> int:
    """First frame >= start_frame with p > 0.5; falls back to the final frame."""
    T = p_row.shape[0]
    if start_frame > T:
        raise ExhaustedInputError(
            f"halting scan starts at frame {start_frame} past input length {T}"
        )
    for j in range(start_frame, T + 1):
        if p_row[j - 1] > 0.5:
            return j
    return T


def mocha_infer_step(q_i: DiffArray, keys: DiffArray, values: DiffArray,
                     start_frame: int, w: int,
                     chunk_u: Optional[DiffArray] = None) -> tuple[DiffArray, int]:
    """Hard MoChA step: scan for the first p > 0.5, attend over its chunk.

    ``chunk_u`` supplies the second-pass chunk energies; when omitted the
    monotonic energies are reused. Returns (context, 1-based trigger frame).
    """
    p = monotonic_p(q_i, keys)
    trigger = _scan_trigger(p.values, start_frame)
    lo = max(0, trigger - w)  # chunk covers frames [trigger-w+1, trigger]
    if chunk_u is None:
        d_k = q_i.shape[-1]
        q2 = q_i if q_i.ndim == 2 else dc.reshape(q_i, (1, d_k))
        chunk_u = dc.reshape(
            dc.scale(dc.matmul(q2, dc.transpose(keys)), 1.0 / math.sqrt(d_k)),
            (keys.shape[0],))
    u_chunk = chunk_u[lo:trigger]
    weights = dc.softmax(dc.reshape(u_chunk, (1, trigger - lo)), axis=-1)
    ctx = dc.matmul(weights, values[lo:trigger])
    return dc.reshape(ctx, (values.shape[1],)), trigger


def ca_infer_step(a_row: DiffArray, values: DiffArray, selector_w: DiffArray,
                  selector_r: DiffArray, start_frame: int) -> tuple[DiffArray, int]:
    """Hard cumulative-attention step.

    Interim contexts restart at zero for each decode step and accumulate from
    frame 1; the halting scan begins at ``start_frame``. Returns the interim
    context at the trigger (or the final frame on fallback).
    """
    interim = ca_interim_contexts(a_row, values)
    p = ca_halting_p(interim, selector_w, selector_r)
    trigger = _scan_trigger(p.values, start_frame)
    return dc.reshape(interim[trigger - 1], (values.shape[1],)), trigger


# ---------------------------------------------------------------------------
# Parameterized streaming cross-attention layers


@dataclass
class StreamingConfig:
    """Shapes and knobs shared by both streaming mechanisms."""

    model_dim: int
    num_heads: int = 1
    chunk_width: int = 4
    noise_std: float = 1.0
    energy_bias_init: float = -1.0
    selector_bias_init: float = -4.0

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise DimensionError(
                f"model_dim {self.model_dim} not divisible by {self.num_heads} streaming heads"
            )
        if self.chunk_width < 1:
            raise ValueError("chunk width must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class HaltingTrace:
    """Per-decode-step halting record.

    Training fills the full probability and alignment rows; inference fills
    the committed trigger frames (1-based, non-decreasing).
    """

    triggers: Optional[list[int]] = None
    p_rows: Optional[np.ndarray] = None      # (heads, steps, frames)
    alpha_rows: Optional[np.ndarray] = None  # (heads, steps, frames)


@dataclass
class AlignmentMatrix:
    """Expected triggering probabilities, decode steps by frames."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2:
            raise DimensionError(f"alignment matrix must be 2-D, got {self.alpha.shape}")

    @property
    def num_steps(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_frames(self) -> int:
        return self.alpha.shape[1]


class _StreamingBase:
    """Projection plumbing shared by the MoChA and CA layers."""

    kind = "base"

    def __init__(self, cfg: StreamingConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.w_q_mono = init_linear(rng, d, d)
        self.w_k_mono = init_linear(rng, d, d)
        self.w_v = init_linear(rng, d, d)
        self.w_o = init_linear(rng, d, d)
        self.energy_bias = dc.parameter(
            np.full(cfg.num_heads, float(cfg.energy_bias_init)))

    def named_params(self) -> dict[str, DiffArray]:
        return {
            "w_q_mono": self.w_q_mono,
            "w_k_mono": self.w_k_mono,
            "w_v": self.w_v,
            "w_o": self.w_o,
            "energy_bias": self.energy_bias,
        }

    def _head_slice(self, h: int) -> slice:
        d_h = self.cfg.head_dim
        return slice(h * d_h, (h + 1) * d_h)

    def _mono_energies(self, queries: DiffArray, keys: DiffArray, h: int) -> DiffArray:
        """Scaled-dot energies plus the per-head offset, (steps, frames)."""
        cols = self._head_slice(h)
        qh = dc.matmul(queries, self.w_q_mono)[:, cols]
        kh = dc.matmul(keys, self.w_k_mono)[:, cols]
        e = dc.scale(dc.matmul(qh, dc.transpose(kh)), 1.0 / math.sqrt(self.cfg.head_dim))
        return dc.add(e, self.energy_bias[h])

    def _values_head(self, values: DiffArray, h: int) -> DiffArray:
        return dc.matmul(values, self.w_v)[:, self._head_slice(h)]


class MoChAAttention(_StreamingBase):
    """Monotonic chunkwise cross-attention with its own chunk-energy projection."""

    kind = "mocha"

    def __init__(self, cfg: StreamingConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d = cfg.model_dim
        self.w_q_chunk = init_linear(rng, d, d)
        self.w_k_chunk = init_linear(rng, d, d)

    def named_params(self) -> dict[str, DiffArray]:
        params = super().named_params()
        params.update({"w_q_chunk": self.w_q_chunk, "w_k_chunk": self.w_k_chunk})
        return params

    def _chunk_energies(self, queries: DiffArray, keys: DiffArray, h: int) -> DiffArray:
        cols = self._head_slice(h)
        qh = dc.matmul(queries, self.w_q_chunk)[:, cols]
        kh = dc.matmul(keys, self.w_k_chunk)[:, cols]
        return dc.scale(dc.matmul(qh, dc.transpose(kh)), 1.0 / math.sqrt(self.cfg.head_dim))

    def forward_train(self, queries: DiffArray, keys: DiffArray, values: DiffArray,
                      mask_bounds: Optional[Sequence[int]] = None,
                      rng: Optional[np.random.Generator] = None,
                      training: bool = True) -> tuple[DiffArray, HaltingTrace]:
        """Expectation-form pass over all decode steps.

        ``mask_bounds`` gives, per decode step, the last visible frame
        (1-based); alignment mass beyond it is exactly zero.
        """
        cfg = self.cfg
        steps, T = queries.shape[0], keys.shape[0]
        head_ctx: list[DiffArray] = []
        p_all = np.zeros((cfg.num_heads, steps, T))
        alpha_all = np.zeros((cfg.num_heads, steps, T))
        bounds = None if mask_bounds is None else [int(b) for b in mask_bounds]
        for h in range(cfg.num_heads):
            e = self._mono_energies(queries, keys, h)
            if training and cfg.noise_std > 0.0:
                if rng is None:
                    raise ValueError("training-mode noise requires an rng")
                e = dc.add(e, dc.constant(rng.normal(0.0, cfg.noise_std, size=e.shape)))
            p_mat = dc.sigmoid(e)
            u_mat = self._chunk_energies(queries, keys, h)
            v_h = self._values_head(values, h)
            alpha = expected_alignment_matrix(p_mat, bounds)
            beta = chunkwise_beta_matrix(alpha, u_mat, cfg.chunk_width)
            head_ctx.append(dc.matmul(beta, v_h))
            p_all[h] = p_mat.values
            alpha_all[h] = alpha.values
        ctx = dc.matmul(dc.concat(head_ctx, axis=1), self.w_o)
        return ctx, HaltingTrace(p_rows=p_all, alpha_rows=alpha_all)

    def forward_infer_step(self, query_row: DiffArray, keys: DiffArray,
                           values: DiffArray, start_frame: int) -> tuple[DiffArray, int]:
        """Hard-halting step; returns (context row, committed trigger frame).

        The committed trigger is the max over heads; each head attends over
        the chunk ending at its own trigger.
        """
        cfg = self.cfg
        head_ctx = []
        trigger = start_frame
        for h in range(cfg.num_heads):
            e = self._mono_energies(query_row, keys, h)
            p = dc.sigmoid(e).values[0]
            t_h = _scan_trigger(p, start_frame)
            u = dc.reshape(self._chunk_energies(query_row, keys, h), (keys.shape[0],))
            lo = max(0, t_h - cfg.chunk_width)
            weights = dc.softmax(dc.reshape(u[lo:t_h], (1, t_h - lo)), axis=-1)
            v_h = self._values_head(values, h)
            head_ctx.append(dc.matmul(weights, v_h[lo:t_h]))
            trigger = max(trigger, t_h)
        return dc.matmul(dc.concat(head_ctx, axis=1), self.w_o), trigger


class CumulativeAttention(_StreamingBase):
    """Cumulative cross-attention halting on accumulated interim contexts."""

    kind = "ca"

    def __init__(self, cfg: StreamingConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d_h = cfg.head_dim
        self.selector_w = init_linear(rng, d_h * cfg.num_heads, cfg.num_heads)
        self.selector_r = dc.parameter(
            np.full(cfg.num_heads, float(cfg.selector_bias_init)))

    def named_params(self) -> dict[str, DiffArray]:
        params = super().named_params()
        params.update({"selector_w": self.selector_w, "selector_r": self.selector_r})
        return params

    def _selector_head(self, h: int) -> DiffArray:
        return self.selector_w[self._head_slice(h), h:h + 1]

    def _mono_weights(self, queries: DiffArray, keys: DiffArray, h: int) -> DiffArray:
        # accumulation weights carry no noise; only the halting selector does
        return dc.sigmoid(self._mono_energies(queries, keys, h))

    def forward_train(self, queries: DiffArray, keys: DiffArray, values: DiffArray,
                      mask_bounds: Optional[Sequence[int]] = None,
                      rng: Optional[np.random.Generator] = None,
                      training: bool = True) -> tuple[DiffArray, HaltingTrace]:
        cfg = self.cfg
        steps, T = queries.shape[0], keys.shape[0]
        d_h = cfg.head_dim
        head_ctx: list[DiffArray] = []
        p_all = np.zeros((cfg.num_heads, steps, T))
        alpha_all = np.zeros((cfg.num_heads, steps, T))
        bounds = None if mask_bounds is None else [int(b) for b in mask_bounds]
        for h in range(cfg.num_heads):
            a_mat = self._mono_weights(queries, keys, h)
            v_h = self._values_head(values, h)
            # interim contexts for every (step, frame) pair in one sweep
            weighted = dc.mul(dc.reshape(a_mat, (steps, T, 1)), v_h)
            interim = dc.cumsum(weighted, axis=1)  # (steps, T, d_h)
            logits = dc.add(dc.matmul(dc.reshape(interim, (steps * T, d_h)),
                                      self._selector_head(h)),
                            self.selector_r[h])
            if training and cfg.noise_std > 0.0:
                if rng is None:
                    raise ValueError("training-mode noise requires an rng")
                logits = dc.add(logits, dc.constant(
                    rng.normal(0.0, cfg.noise_std, size=logits.shape)))
            p_mat = dc.reshape(dc.sigmoid(logits), (steps, T))
            alpha = expected_alignment_matrix(p_mat, bounds)
            ctx = dc.sum_(dc.mul(dc.reshape(alpha, (steps, T, 1)), interim), axis=1)
            head_ctx.append(ctx)
            p_all[h] = p_mat.values
            alpha_all[h] = alpha.values
        ctx = dc.matmul(dc.concat(head_ctx, axis=1), self.w_o)
        return ctx, HaltingTrace(p_rows=p_all, alpha_rows=alpha_all)

    def forward_infer_step(self, query_row: DiffArray, keys: DiffArray,
                           values: DiffArray, start_frame: int) -> tuple[DiffArray, int]:
        cfg = self.cfg
        head_ctx = []
        trigger = start_frame
        for h in range(cfg.num_heads):
            a_row = dc.reshape(self._mono_weights(query_row, keys, h), (keys.shape[0],))
            v_h = self._values_head(values, h)
            ctx, t_h = ca_infer_step(a_row, v_h, self._selector_head(h),
                                     self.selector_r[h], start_frame)
            head_ctx.append(dc.reshape(ctx, (1, cfg.head_dim)))
            trigger = max(trigger, t_h)
        return dc.matmul(dc.concat(head_ctx, axis=1), self.w_o), trigger


def make_streaming_attention(kind: str, cfg: StreamingConfig,
                             rng: np.random.Generator):
    if kind == "mocha":
        return MoChAAttention(cfg, rng)
    if kind == "ca":
        return CumulativeAttention(cfg, rng)
    raise ValueError(f"unknown streaming attention kind: {kind!r}")
