"""Verification suites: alignment-recursion oracle and gradient checks.

These back the ``oracle-check`` and ``gradcheck`` CLI subcommands and the
acceptance tests. Each check compares a production path against an
independent reference (brute-force path enumeration, or central finite
differences) and reports the worst error seen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attention import (
    CumulativeAttention,
    MoChAAttention,
    MultiHeadAttention,
    MultiHeadConfig,
    StreamingConfig,
    expected_alignment,
    initial_alignment,
    scaled_dot_attention,
)
from .model import Model, ModelConfig
from .oracles import enumerate_alignment


@dataclass
class CheckResult:
    name: str
    worst: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.worst < self.bound

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3e} (bound {self.bound:.0e})"


def alignment_matrix_via_recursion(p: np.ndarray, mask_bounds=None) -> np.ndarray:
    """Chain the production recursion over all decode steps."""
    steps, T = p.shape
    prev = initial_alignment(T)
    rows = []
    for i in range(steps):
        bound = None if mask_bounds is None else mask_bounds[i]
        row = expected_alignment(dc.constant(p[i]), prev, bound)
        rows.append(row.values)
        prev = row
    return np.stack(rows)


def run_oracle_suite(cases: int = 200, seed: int = 0, max_steps: int = 4,
                     max_frames: int = 8, bound: float = 1e-8) -> list[CheckResult]:
    """Recursion vs brute-force enumeration on random instances."""
    rng = np.random.default_rng(seed)
    worst_plain = 0.0
    worst_masked = 0.0
    for case in range(cases):
        steps = int(rng.integers(1, max_steps + 1))
        T = int(rng.integers(2, max_frames + 1))
        p = rng.random((steps, T))
        got = alignment_matrix_via_recursion(p)
        want = enumerate_alignment(p)
        worst_plain = max(worst_plain, float(np.abs(got - want).max()))
        if case % 4 == 0:
            bounds = [int(b) for b in rng.integers(1, T + 1, size=steps)]
            got_m = alignment_matrix_via_recursion(p, bounds)
            want_m = enumerate_alignment(p, bounds)
            worst_masked = max(worst_masked, float(np.abs(got_m - want_m).max()))
    return [
        CheckResult("alignment recursion vs path enumeration", worst_plain, bound),
        CheckResult("masked recursion vs masked enumeration", worst_masked, bound),
    ]


def _grad_softmax_attention(rng: np.random.Generator) -> CheckResult:
    q = dc.parameter(rng.normal(size=(3, 4)))
    k = dc.parameter(rng.normal(size=(5, 4)))
    v = dc.parameter(rng.normal(size=(5, 4)))
    err = dc.grad_check(lambda: scaled_dot_attention(q, k, v).sum(), [q, k, v])
    return CheckResult("softmax attention gradients", err, 1e-4)


def _grad_multi_head(rng: np.random.Generator) -> CheckResult:
    attn = MultiHeadAttention(MultiHeadConfig(num_heads=2, model_dim=4), rng)
    q = dc.parameter(rng.normal(size=(2, 4)))
    kv = dc.parameter(rng.normal(size=(4, 4)))
    wrt = [q, kv] + list(attn.named_params().values())
    err = dc.grad_check(lambda: attn.forward(q, kv, kv).sum(), wrt)
    return CheckResult("multi-head attention gradients", err, 1e-4)


def _grad_mocha(rng: np.random.Generator) -> CheckResult:
    cfg = StreamingConfig(model_dim=4, num_heads=1, chunk_width=2, noise_std=0.0)
    attn = MoChAAttention(cfg, rng)
    queries = dc.parameter(rng.normal(size=(3, 4)))
    keys = dc.parameter(rng.normal(size=(5, 4)))
    values = dc.parameter(rng.normal(size=(5, 4)))
    wrt = [queries, keys, values] + list(attn.named_params().values())

    def f():
        ctx, _ = attn.forward_train(queries, keys, values, training=False)
        return ctx.sum()

    return CheckResult("monotonic chunkwise train path gradients",
                       dc.grad_check(f, wrt), 1e-4)


def _grad_ca(rng: np.random.Generator) -> CheckResult:
    cfg = StreamingConfig(model_dim=4, num_heads=1, noise_std=0.0)
    attn = CumulativeAttention(cfg, rng)
    queries = dc.parameter(rng.normal(size=(3, 4)))
    keys = dc.parameter(rng.normal(size=(5, 4)))
    values = dc.parameter(rng.normal(size=(5, 4)))
    wrt = [queries, keys, values] + list(attn.named_params().values())

    def f():
        ctx, _ = attn.forward_train(queries, keys, values, training=False)
        return ctx.sum()

    return CheckResult("cumulative attention train path gradients",
                       dc.grad_check(f, wrt), 1e-4)


def _grad_full_model(rng: np.random.Generator, kind: str, layers: int,
                     bound: float) -> CheckResult:
    cfg = ModelConfig(
        vocab_size=5, feature_dim=3, model_dim=8, encoder_layers=layers,
        decoder_layers=layers, ffn_dim=12, attention_heads=2,
        streaming_kind=kind, streaming_heads=1, chunk_width=2,
        subsample_factor=2, noise_std=0.0)
    model = Model(cfg, seed=11)
    frames = rng.normal(size=(6, 3))
    tokens = [int(t) for t in rng.integers(0, 5, size=3)]
    params = model.named_params()

    def f():
        enc = model.encode(frames)
        logits, _, _ = model.decode_train(enc, tokens, training=False)
        return model.loss(logits, tokens)

    err = dc.grad_check(f, list(params.values()))
    return CheckResult(f"full model loss gradients ({kind}, {layers}-layer)", err, bound)


def run_grad_suite(seed: int = 0) -> list[CheckResult]:
    """Central-difference checks over every differentiable pipeline.

    Each check draws from its own derived stream so results do not depend
    on suite ordering. The default seed keeps all probe points clear of
    ReLU kinks, where central differences are meaningless.
    """
    streams = [np.random.default_rng(seed + k) for k in range(5)]
    model_rng = np.random.default_rng(seed + 9)
    return [
        _grad_softmax_attention(streams[0]),
        _grad_multi_head(streams[1]),
        _grad_mocha(streams[2]),
        _grad_ca(streams[3]),
        _grad_full_model(model_rng, "ca", 2, 1e-3),
        _grad_full_model(np.random.default_rng(seed + 9), "mocha", 1, 1e-3),
    ]
