"""Toy streaming encoder-decoder: mean-pool subsampling front-end,
self-attention encoder, and a decoder whose final layer carries the
streaming cross-attention (monotonic chunkwise, cumulative, or a global
softmax fallback for offline baselines).

Teacher-forced training returns the expected-alignment rows needed for
triggering-point extraction; greedy inference makes hard halting decisions
and reports trigger frames in original (pre-subsampling) units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .attention import (
    AlignmentMatrix,
    HaltingTrace,
    MultiHeadAttention,
    MultiHeadConfig,
    StreamingConfig,
    init_linear,
    make_streaming_attention,
    scaled_dot_attention,
)
from .diffcore import DiffArray, DimensionError


class InvalidBoundError(ValueError):
    """A frame-visibility bound below 1 was supplied."""


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int = 8
    model_dim: int = 16
    encoder_layers: int = 1
    decoder_layers: int = 1
    ffn_dim: int = 32
    attention_heads: int = 2
    streaming_kind: str = "ca"  # {"mocha", "ca", "global"}
    streaming_heads: int = 1
    chunk_width: int = 4
    subsample_factor: int = 4
    noise_std: float = 1.0
    energy_bias_init: float = -1.0
    selector_bias_init: float = -4.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.attention_heads != 0:
            raise DimensionError("model_dim must be divisible by attention_heads")
        if self.streaming_kind not in ("mocha", "ca", "global"):
            raise ValueError(f"unknown streaming kind {self.streaming_kind!r}")
        if self.streaming_kind != "global" and self.model_dim % self.streaming_heads != 0:
            raise DimensionError("model_dim must be divisible by streaming_heads")
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.decoder_layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.encoder_layers < 0:
            raise ValueError("encoder layer count must be >= 0")

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    @property
    def eos_id(self) -> int:
        return self.vocab_size + 1

    @property
    def full_vocab(self) -> int:
        # task tokens plus BOS/EOS specials
        return self.vocab_size + 2


@dataclass
class EncodedUtterance:
    """Encoder states after subsampling, plus the frame index map.

    ``frame_map[s]`` is the 1-based original frame at which subsampled frame
    ``s+1`` becomes available (the last original frame pooled into it).
    """

    states: DiffArray
    frame_map: np.ndarray
    original_length: int

    @property
    def num_frames(self) -> int:
        return self.states.shape[0]


@lru_cache(maxsize=64)
def _positional_encoding(length: int, dim: int) -> bytes:
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(dim)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.tobytes()


def positional_encoding(length: int, dim: int) -> np.ndarray:
    return np.frombuffer(_positional_encoding(length, dim), dtype=np.float64).reshape(length, dim)


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = init_linear(rng, n_in, n_out)
        self.b = dc.parameter(np.zeros((1, n_out)))

    def named_params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x: DiffArray) -> DiffArray:
        return dc.add(dc.matmul(x, self.w), self.b)


class LayerNorm:
    EPS = 1e-5

    def __init__(self, dim: int):
        self.gamma = dc.parameter(np.ones((1, dim)))
        self.beta = dc.parameter(np.zeros((1, dim)))

    def named_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x: DiffArray) -> DiffArray:
        m = x.mean(axis=1, keepdims=True)
        centered = dc.sub(x, m)
        var = dc.mul(centered, centered).mean(axis=1, keepdims=True)
        std = dc.power(var + self.EPS, 0.5)
        return dc.add(dc.mul(dc.div(centered, std), self.gamma), self.beta)


class FeedForward:
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.lin1 = Linear(rng, dim, hidden)
        self.lin2 = Linear(rng, hidden, dim)

    def named_params(self):
        out = {}
        for name, sub in (("lin1", self.lin1), ("lin2", self.lin2)):
            for k, v in sub.named_params().items():
                out[f"{name}.{k}"] = v
        return out

    def forward(self, x: DiffArray) -> DiffArray:
        return self.lin2.forward(dc.relu(self.lin1.forward(x)))


def _collect(prefix: str, obj) -> dict[str, DiffArray]:
    return {f"{prefix}.{k}": v for k, v in obj.named_params().items()}


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        mh = MultiHeadConfig(cfg.attention_heads, cfg.model_dim)
        self.self_attn = MultiHeadAttention(mh, rng)
        self.ln1 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(rng, cfg.model_dim, cfg.ffn_dim)
        self.ln2 = LayerNorm(cfg.model_dim)

    def named_params(self):
        out = {}
        out.update(_collect("self_attn", self.self_attn))
        out.update(_collect("ln1", self.ln1))
        out.update(_collect("ffn", self.ffn))
        out.update(_collect("ln2", self.ln2))
        return out

    def forward(self, x: DiffArray) -> DiffArray:
        x = self.ln1.forward(dc.add(x, self.self_attn.forward(x, x, x)))
        return self.ln2.forward(dc.add(x, self.ffn.forward(x)))


class DecoderLayer:
    """Causal self-attention, cross-attention, feed-forward, all post-norm.

    Only the final decoder layer carries the streaming mechanism; lower
    layers use global softmax cross-attention (optionally restricted by a
    visibility mask at inference).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, streaming: bool):
        mh = MultiHeadConfig(cfg.attention_heads, cfg.model_dim)
        self.self_attn = MultiHeadAttention(mh, rng)
        self.ln1 = LayerNorm(cfg.model_dim)
        self.streaming = streaming and cfg.streaming_kind != "global"
        if self.streaming:
            scfg = StreamingConfig(
                model_dim=cfg.model_dim,
                num_heads=cfg.streaming_heads,
                chunk_width=cfg.chunk_width,
                noise_std=cfg.noise_std,
                energy_bias_init=cfg.energy_bias_init,
                selector_bias_init=cfg.selector_bias_init,
            )
            self.cross = make_streaming_attention(cfg.streaming_kind, scfg, rng)
        else:
            self.cross = MultiHeadAttention(mh, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(rng, cfg.model_dim, cfg.ffn_dim)
        self.ln3 = LayerNorm(cfg.model_dim)

    def named_params(self):
        out = {}
        out.update(_collect("self_attn", self.self_attn))
        out.update(_collect("ln1", self.ln1))
        out.update(_collect("cross", self.cross))
        out.update(_collect("ln2", self.ln2))
        out.update(_collect("ffn", self.ffn))
        out.update(_collect("ln3", self.ln3))
        return out


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _row_bound_mask(rows: int, frames: int, bounds: Sequence[int]) -> np.ndarray:
    # row r may look at subsampled frames 1..bounds[r]
    mask = np.zeros((rows, frames), dtype=bool)
    for r in range(rows):
        mask[r, :max(1, min(int(bounds[r]), frames))] = True
    return mask


def smoothed_loss(logits: DiffArray, targets: Sequence[int],
                  smoothing: float = 0.1) -> DiffArray:
    """Mean token cross-entropy on smoothing-mixed output probabilities.

    The predicted distribution is mixed with uniform before the log, so a
    perfectly confident correct prediction approaches the finite floor
    -log(1 - s + s/V).
    """
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape[0] != n:
        raise DimensionError(f"loss: {n} logit rows vs {targets.shape[0]} targets")
    probs = dc.softmax(logits, axis=1)
    onehot = np.zeros((n, vocab))
    onehot[np.arange(n), targets] = 1.0
    picked = dc.sum_(dc.mul(probs, dc.constant(onehot)), axis=1)
    mixed = dc.scale(picked, 1.0 - smoothing) + (smoothing / vocab)
    return dc.scale(dc.sum_(dc.log(mixed)), -1.0 / n)


class Model:
    """Encoder-decoder with a streaming final cross-attention layer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.embedding = dc.parameter(
            rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d),
                        size=(cfg.full_vocab, d)))
        self.input_proj = Linear(rng, cfg.feature_dim, d)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]
        self.decoder = [
            DecoderLayer(cfg, rng, streaming=(i == cfg.decoder_layers - 1))
            for i in range(cfg.decoder_layers)
        ]
        self.out_proj = Linear(rng, d, cfg.full_vocab)

    def named_params(self) -> dict[str, DiffArray]:
        out = {"embedding": self.embedding}
        out.update(_collect("input_proj", self.input_proj))
        for i, layer in enumerate(self.encoder):
            out.update(_collect(f"encoder.{i}", layer))
        for i, layer in enumerate(self.decoder):
            out.update(_collect(f"decoder.{i}", layer))
        out.update(_collect("out_proj", self.out_proj))
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    # -- encoder ------------------------------------------------------------

    def encode(self, frames: np.ndarray) -> EncodedUtterance:
        """Mean-pool subsample, project, then run the encoder stack."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise DimensionError(f"encode: expected (frames, features), got {frames.shape}")
        T = frames.shape[0]
        f = self.cfg.subsample_factor
        T_sub = (T + f - 1) // f
        pool = np.zeros((T_sub, T))
        frame_map = np.zeros(T_sub, dtype=np.intp)
        for s in range(T_sub):
            lo, hi = s * f, min((s + 1) * f, T)
            pool[s, lo:hi] = 1.0 / (hi - lo)
            frame_map[s] = hi  # 1-based original frame completing this state
        x = self.input_proj.forward(dc.matmul(dc.constant(pool), dc.constant(frames)))
        if self.encoder:
            # content scaled up so the additive position table cannot swamp it
            x = dc.add(dc.scale(x, math.sqrt(self.cfg.model_dim)),
                       dc.constant(positional_encoding(T_sub, self.cfg.model_dim)))
            for layer in self.encoder:
                x = layer.forward(x)
        return EncodedUtterance(states=x, frame_map=frame_map, original_length=T)

    # -- training path -------------------------------------------------------

    def decode_train(self, encoded: EncodedUtterance, tokens: Sequence[int],
                     mask_bounds: Optional[Sequence[int]] = None,
                     rng: Optional[np.random.Generator] = None,
                     training: bool = True,
                     ) -> tuple[DiffArray, AlignmentMatrix, HaltingTrace]:
        """Teacher-forced pass; returns logits, the alignment rows of the
        streaming layer (first head), and the full halting trace.

        ``mask_bounds`` holds one last-visible-frame index (1-based,
        subsampled units) per reference token; the end-of-sequence step is
        left unmasked.
        """
        cfg = self.cfg
        tokens = list(tokens)
        if not tokens:
            raise DimensionError("decode_train: empty reference")
        T_sub = encoded.num_frames
        bounds = None
        if mask_bounds is not None:
            if len(mask_bounds) != len(tokens):
                raise DimensionError(
                    f"decode_train: {len(mask_bounds)} bounds vs {len(tokens)} tokens")
            if any(b < 1 for b in mask_bounds):
                raise InvalidBoundError(f"mask bounds must be >= 1, got {list(mask_bounds)}")
            bounds = [min(int(b), T_sub) for b in mask_bounds] + [T_sub]

        ids = [cfg.bos_id] + tokens
        steps = len(ids)
        x = dc.add(dc.scale(dc.take_rows(self.embedding, ids), math.sqrt(cfg.model_dim)),
                   dc.constant(positional_encoding(steps, cfg.model_dim)))
        causal = _causal_mask(steps)
        trace = HaltingTrace()
        alpha_diag: Optional[np.ndarray] = None
        for layer in self.decoder:
            x = layer.ln1.forward(dc.add(x, layer.self_attn.forward(x, x, x, causal)))
            if layer.streaming:
                ctx, trace = layer.cross.forward_train(
                    x, encoded.states, encoded.states,
                    mask_bounds=bounds, rng=rng, training=training)
                alpha_diag = trace.alpha_rows[0]
            else:
                ctx = layer.cross.forward(x, encoded.states, encoded.states)
                if layer is self.decoder[-1]:
                    # global fallback: expose the softmax weights as diagnostics
                    weights = _global_weights(x, encoded.states, layer.cross)
                    alpha_diag = weights
                    trace = HaltingTrace(alpha_rows=weights[None, :, :])
            x = layer.ln2.forward(dc.add(x, ctx))
            x = layer.ln3.forward(dc.add(x, layer.ffn.forward(x)))
        logits = self.out_proj.forward(x)
        return logits, AlignmentMatrix(alpha_diag), trace

    def loss(self, logits: DiffArray, tokens: Sequence[int]) -> DiffArray:
        targets = list(tokens) + [self.cfg.eos_id]
        return smoothed_loss(logits, targets, self.cfg.label_smoothing)

    # -- inference path ------------------------------------------------------

    def decode_infer(self, encoded: EncodedUtterance, max_steps: int = 64,
                     ) -> tuple[list[int], list[int]]:
        """Greedy decode with hard halting.

        Returns emitted task tokens (end-of-sequence excluded) and their
        trigger frames in original units; triggers are non-decreasing.
        """
        cfg = self.cfg
        T_sub = encoded.num_frames
        emitted: list[int] = []
        triggers_sub: list[int] = []
        committed_bounds: list[int] = [T_sub]  # per decoder-input row; BOS row is free
        resume = 1
        with dc.no_grad():
            for _ in range(max_steps):
                ids = [cfg.bos_id] + emitted
                if cfg.streaming_kind == "global":
                    logits_row, trigger = self._infer_pass(
                        encoded, ids, [T_sub] * len(ids), resume)
                else:
                    # pass 1 finds the trigger; pass 2 exposes exactly the
                    # triggered frames to the lower layers
                    _, trigger = self._infer_pass(
                        encoded, ids, committed_bounds[:-1] + [resume], resume)
                    logits_row, _ = self._infer_pass(
                        encoded, ids, committed_bounds[:-1] + [trigger], resume)
                token = int(np.argmax(logits_row))
                if token == cfg.eos_id:
                    break
                emitted.append(token)
                triggers_sub.append(trigger)
                committed_bounds[-1] = trigger
                committed_bounds.append(T_sub)
                resume = trigger
        triggers = [int(encoded.frame_map[t - 1]) for t in triggers_sub]
        return emitted, triggers

    def _infer_pass(self, encoded: EncodedUtterance, ids: list[int],
                    row_bounds: list[int], resume: int) -> tuple[np.ndarray, int]:
        """One stack evaluation for the last row; returns (logits row, trigger)."""
        cfg = self.cfg
        steps = len(ids)
        T_sub = encoded.num_frames
        x = dc.add(dc.scale(dc.take_rows(self.embedding, ids), math.sqrt(cfg.model_dim)),
                   dc.constant(positional_encoding(steps, cfg.model_dim)))
        causal = _causal_mask(steps)
        vis = _row_bound_mask(steps, T_sub, row_bounds)
        trigger = T_sub
        for layer in self.decoder:
            x = layer.ln1.forward(dc.add(x, layer.self_attn.forward(x, x, x, causal)))
            if layer is self.decoder[-1]:
                h = x[steps - 1:steps]
                if layer.streaming:
                    ctx, trigger = layer.cross.forward_infer_step(
                        h, encoded.states, encoded.states, resume)
                else:
                    ctx = layer.cross.forward(h, encoded.states, encoded.states,
                                              vis[steps - 1:steps])
                h = layer.ln2.forward(dc.add(h, ctx))
                h = layer.ln3.forward(dc.add(h, layer.ffn.forward(h)))
                logits = self.out_proj.forward(h)
                return logits.values[0], trigger
            ctx = layer.cross.forward(x, encoded.states, encoded.states, vis)
            x = layer.ln2.forward(dc.add(x, ctx))
            x = layer.ln3.forward(dc.add(x, layer.ffn.forward(x)))
        raise AssertionError("decoder stack has no final layer")


def _global_weights(queries: DiffArray, keys: DiffArray,
                    attn: MultiHeadAttention) -> np.ndarray:
    """Head-averaged softmax cross-attention weights, for diagnostics only."""
    cfg = attn.cfg
    with dc.no_grad():
        q = dc.matmul(queries, attn.w_q)
        k = dc.matmul(keys, attn.w_k)
        acc = np.zeros((queries.shape[0], keys.shape[0]))
        for h in range(cfg.num_heads):
            cols = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
            logits = dc.scale(dc.matmul(q[:, cols], dc.transpose(k[:, cols])),
                              1.0 / math.sqrt(cfg.head_dim))
            acc += dc.softmax(logits, axis=-1).values
    return acc / cfg.num_heads
