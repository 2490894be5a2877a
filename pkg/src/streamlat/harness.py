"""Two-stage training orchestration.

Stage one (pre-training) trains the streaming model normally while
recording, per granularity unit, the triggering points seen alongside the
best accuracy so far. Stage two (fine-tuning) masks the alignment
recursion at each token's recorded boundary plus an offset, and keeps
revising the records under the accuracy/coverage policy. A fixed-boundary
mode freezes the store at ground-truth acoustic ends for comparison, and a
baseline mode continues unmasked training over the same extra epochs.

Batch composition is frozen up front (sorted by length, then id), so
per-unit statistics compare like with like across epochs. Everything is
deterministic given the config seed; checkpoints capture parameters,
optimizer moments, and the noise RNG state so a resumed run is bit-exact.
"""

from __future__ import annotations

import base64
import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .config import RunConfig, config_from_dict, config_to_dict
from .diffcore import DiffArray
from .metrics import (
    LatencyEntry,
    NoAlignedTokensError,
    corpus_latency,
    token_error_rate,
)
from .model import Model
from .srmlt import RecordStore, UnitResult, fixed_store_from_boundaries, triggers_from_stack
from .synthdata import SyntheticUtterance, TaskSpec, generate, split_counts

CHECKPOINT_FORMAT_VERSION = 1


class DivergedError(RuntimeError):
    """Training loss stopped being finite."""


class CheckpointError(ValueError):
    """A checkpoint file failed validation."""


@dataclass
class DataBundle:
    train: list[SyntheticUtterance]
    dev: list[SyntheticUtterance]
    test: list[SyntheticUtterance]


def prepare_data(config: RunConfig) -> DataBundle:
    full = generate(config.task, config.data.total)
    train, dev, test = split_counts(full, [config.data.train_utterances,
                                           config.data.dev_utterances,
                                           config.data.test_utterances])
    return DataBundle(train=train, dev=dev, test=test)


def make_batches(utterances: Sequence[SyntheticUtterance],
                 batch_size: int) -> list[list[SyntheticUtterance]]:
    """Frozen assignment: sorted by length then id, chunked in order."""
    ordered = sorted(utterances, key=lambda u: (u.num_frames, u.utterance_id))
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam with bias correction; parameters update in sorted-name order."""

    def __init__(self, params: dict[str, DiffArray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.values -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: _encode_array(v) for k, v in self.m.items()},
            "v": {k: _encode_array(v) for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = _decode_array(state["m"][k], self.m[k].shape)
            self.v[k] = _decode_array(state["v"][k], self.v[k].shape)


def lr_at(step: int, peak: float, warmup: int) -> float:
    if warmup <= 0:
        return peak
    return peak * min(1.0, step / warmup)


# ---------------------------------------------------------------------------
# Train state and checkpoints


@dataclass
class TrainState:
    config: RunConfig
    model: Model
    opt: Adam
    noise_rng: np.random.Generator
    global_step: int = 0
    epoch: int = 0  # completed epochs within the current phase
    phase: str = "pretrain"


def init_state(config: RunConfig) -> TrainState:
    model = Model(config.model_config(), seed=config.run.seed)
    opt = Adam(model.named_params())
    noise_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.run.seed, spawn_key=(7,)))
    return TrainState(config=config, model=model, opt=opt, noise_rng=noise_rng)


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(text), dtype="<f8")
    if flat.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor payload size {flat.size} does not match {shape}")
    return flat.reshape(shape).copy()


def state_to_dict(state: TrainState) -> dict:
    params = {
        name: {"shape": list(p.values.shape), "data": _encode_array(p.values)}
        for name, p in state.model.named_params().items()
    }
    return {
        "format": "streamlat-checkpoint",
        "version": CHECKPOINT_FORMAT_VERSION,
        "config": config_to_dict(state.config),
        "phase": state.phase,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "rng_state": state.noise_rng.bit_generator.state,
        "params": params,
        "opt": state.opt.state_dict(),
    }


def state_from_dict(data: dict) -> TrainState:
    if data.get("format") != "streamlat-checkpoint":
        raise CheckpointError("not a checkpoint payload")
    if data.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')}")
    config = config_from_dict(data["config"])
    state = init_state(config)
    params = state.model.named_params()
    saved = data["params"]
    if set(saved) != set(params):
        missing = set(params) ^ set(saved)
        raise CheckpointError(f"parameter names disagree: {sorted(missing)}")
    for name, p in params.items():
        entry = saved[name]
        if tuple(entry["shape"]) != p.values.shape:
            raise CheckpointError(
                f"tensor {name}: shape {entry['shape']} vs expected {p.values.shape}")
        p.values[...] = _decode_array(entry["data"], p.values.shape)
    state.opt.load_state_dict(data["opt"])
    state.noise_rng.bit_generator.state = data["rng_state"]
    state.phase = data["phase"]
    state.epoch = int(data["epoch"])
    state.global_step = int(data["global_step"])
    return state


def save_checkpoint(state: TrainState, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fp:
        json.dump(state_to_dict(state), fp)
        fp.write("\n")


def load_checkpoint(path) -> TrainState:
    import json

    with open(path, "r", encoding="utf-8") as fp:
        return state_from_dict(json.load(fp))


def clone_state(state: TrainState) -> TrainState:
    """Deep copy through the checkpoint codec, so clones match file round-trips."""
    return state_from_dict(copy.deepcopy(state_to_dict(state)))


def clone_store(store: RecordStore) -> RecordStore:
    return RecordStore.loads(store.dumps())


# ---------------------------------------------------------------------------
# Logging


@dataclass
class EpochLog:
    phase: str
    epoch: int
    loss: float
    train_accuracy: float
    train_coverage: float
    dev_token_error_rate: float
    dev_delta_corpus: float
    records_updated: int


@dataclass
class TrainOutcome:
    state: TrainState
    store: RecordStore
    log: list[EpochLog]
    extra_stores: dict[str, RecordStore] = field(default_factory=dict)


@dataclass
class EvalResult:
    token_error_rate: float
    delta_corpus: float
    aligned_tokens: int
    utterances: int
    per_token_offsets: list[list[float]] = field(default_factory=list)


def evaluate_model(model: Model, dataset: Sequence[SyntheticUtterance],
                   max_steps: int = 48) -> EvalResult:
    """Greedy hard-halting decode; token error rate plus corpus latency."""
    hyps: list[list[int]] = []
    entries: list[LatencyEntry] = []
    for utt in dataset:
        enc = model.encode(utt.frames)
        tokens, triggers = model.decode_infer(enc, max_steps=max_steps)
        hyps.append(tokens)
        entries.append(LatencyEntry(
            triggers=triggers, boundaries=utt.boundaries,
            hyp_tokens=tokens, ref_tokens=utt.tokens))
    ter = token_error_rate(hyps, [u.tokens for u in dataset])
    try:
        report = corpus_latency(entries)
        delta, count, offsets = report.delta_corpus, report.token_count, report.per_utterance
    except NoAlignedTokensError:
        delta, count, offsets = float("nan"), 0, []
    return EvalResult(token_error_rate=ter, delta_corpus=delta,
                      aligned_tokens=count, utterances=len(dataset),
                      per_token_offsets=offsets)


# ---------------------------------------------------------------------------
# Batch step


@dataclass
class _BatchStats:
    loss: float
    correct: int
    tokens: int
    coverage_sum: float
    candidates: dict[str, list[int]]          # utterance id -> candidate triggers
    correctness: dict[str, list[bool]]        # utterance id -> per-token hits
    sub_lengths: dict[str, int]


def _candidate_triggers(store: RecordStore, utt: SyntheticUtterance,
                        alpha_stack: np.ndarray, t_sub: int) -> list[int]:
    n = len(utt.tokens)
    raw = triggers_from_stack(alpha_stack[:, :n, :], on_degenerate="none")
    previous = store.lookup_triggers(utt.utterance_id, n)
    out = []
    for i, cand in enumerate(raw):
        if cand is not None:
            out.append(cand)
        elif previous[i] is not None:
            out.append(previous[i])  # degenerate row: keep the old boundary
        else:
            out.append(t_sub)
    return out


def _train_batch(state: TrainState, batch: Sequence[SyntheticUtterance],
                 store: RecordStore, apply_bounds: bool, lr: float) -> _BatchStats:
    cfg = state.config
    model = state.model
    delta = cfg.training.delta
    total_positions = sum(len(u.tokens) + 1 for u in batch)
    loss_total = 0.0
    correct = 0
    tokens = 0
    cov_sum = 0.0
    candidates: dict[str, list[int]] = {}
    correctness: dict[str, list[bool]] = {}
    sub_lengths: dict[str, int] = {}

    for utt in batch:
        enc = model.encode(utt.frames)
        t_sub = enc.num_frames
        bounds = None
        if apply_bounds:
            looked = store.lookup_triggers(utt.utterance_id, len(utt.tokens))
            bounds = [min(b + delta, t_sub) if b is not None else t_sub for b in looked]
        logits, _, trace = model.decode_train(
            enc, utt.tokens, mask_bounds=bounds, rng=state.noise_rng, training=True)
        loss = model.loss(logits, utt.tokens)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergedError(
                f"loss became {value} on {utt.utterance_id} "
                f"(phase {state.phase}, step {state.global_step})")
        weight = (len(utt.tokens) + 1) / total_positions
        loss_total += weight * value
        dc.scale(loss, weight).backward()

        preds = np.argmax(logits.values[:len(utt.tokens)], axis=1)
        hits = [int(p) == t for p, t in zip(preds, utt.tokens)]
        cand = _candidate_triggers(store, utt, trace.alpha_rows, t_sub)
        correctness[utt.utterance_id] = hits
        candidates[utt.utterance_id] = cand
        sub_lengths[utt.utterance_id] = t_sub
        correct += sum(hits)
        tokens += len(hits)
        cov_sum += sum(b / t_sub for b in cand)

    state.opt.step(lr)
    model.zero_grad()
    state.global_step += 1
    return _BatchStats(loss=loss_total, correct=correct, tokens=tokens,
                       coverage_sum=cov_sum, candidates=candidates,
                       correctness=correctness, sub_lengths=sub_lengths)


def _unit_results(batch_key: str, stats: _BatchStats, store: RecordStore,
                  batch: Sequence[SyntheticUtterance]) -> list[UnitResult]:
    """Partition one batch's statistics into the store's granularity units."""
    g = store.granularity
    if g == "minibatch":
        return [UnitResult(
            stats_key=batch_key,
            accuracy=stats.correct / stats.tokens,
            coverage=stats.coverage_sum / stats.tokens,
            triggers={u.utterance_id: stats.candidates[u.utterance_id] for u in batch})]
    out: list[UnitResult] = []
    for utt in batch:
        hits = stats.correctness[utt.utterance_id]
        cand = stats.candidates[utt.utterance_id]
        t_sub = stats.sub_lengths[utt.utterance_id]
        if g == "utterance":
            out.append(UnitResult(
                stats_key=utt.utterance_id,
                accuracy=sum(hits) / len(hits),
                coverage=float(np.mean([b / t_sub for b in cand])),
                triggers={utt.utterance_id: cand}))
        else:  # token
            for i, (hit, b) in enumerate(zip(hits, cand)):
                key = RecordStore.token_key(utt.utterance_id, i)
                out.append(UnitResult(
                    stats_key=key, accuracy=float(hit), coverage=b / t_sub,
                    triggers={key: [b]}))
    return out


# ---------------------------------------------------------------------------
# Phases


def _run_phase(state: TrainState, data: DataBundle, stores: dict[str, RecordStore],
               primary: str, phase: str, epochs: int, apply_bounds: bool,
               lr_scale: float, log: list[EpochLog],
               out_dir=None, progress=None) -> None:
    cfg = state.config
    batches = make_batches(data.train, cfg.training.batch_size)
    store = stores[primary]
    for epoch in range(state.epoch, epochs):
        loss_sum = 0.0
        correct = 0
        tokens = 0
        cov_sum = 0.0
        updated = 0
        for b_idx, batch in enumerate(batches):
            lr = lr_scale * lr_at(state.global_step + 1,
                                  cfg.training.peak_lr, cfg.training.warmup_steps)
            stats = _train_batch(state, batch, store, apply_bounds, lr)
            loss_sum += stats.loss
            correct += stats.correct
            tokens += stats.tokens
            cov_sum += stats.coverage_sum
            batch_key = f"batch:{b_idx:05d}"
            for g, st in stores.items():
                results = _unit_results(batch_key, stats, st, batch)
                hits = sum(st.maybe_update(res, phase) for res in results)
                if g == primary:
                    updated += hits
        if cfg.training.eval_every and (epoch + 1) % cfg.training.eval_every == 0:
            dev = evaluate_model(state.model, data.dev, cfg.run.max_decode_steps)
            dev_ter, dev_delta = dev.token_error_rate, dev.delta_corpus
        else:
            dev_ter, dev_delta = float("nan"), float("nan")
        entry = EpochLog(
            phase=phase, epoch=epoch + 1,
            loss=loss_sum / len(batches),
            train_accuracy=correct / tokens,
            train_coverage=cov_sum / tokens,
            dev_token_error_rate=dev_ter,
            dev_delta_corpus=dev_delta,
            records_updated=updated)
        log.append(entry)
        state.epoch = epoch + 1
        if progress is not None:
            progress(entry)
        every = cfg.training.checkpoint_every
        if out_dir is not None and every and (epoch + 1) % every == 0:
            _write_cadence(state, store, out_dir, phase, epoch + 1)


def _write_cadence(state: TrainState, store: RecordStore, out_dir, phase: str,
                   epoch: int) -> None:
    from pathlib import Path

    base = Path(out_dir)
    save_checkpoint(state, base / f"checkpoint-{phase}-ep{epoch:03d}.json")
    store.save(base / f"records-{phase}-ep{epoch:03d}.txt")


def pretrain(config: RunConfig, data: Optional[DataBundle] = None,
             state: Optional[TrainState] = None,
             extra_granularities: Sequence[str] = (),
             out_dir=None, progress=None) -> TrainOutcome:
    """Stage one: unmasked training with triggering-point recording."""
    data = data or prepare_data(config)
    state = state or init_state(config)
    if state.phase != "pretrain":
        raise ValueError(f"cannot pretrain from a {state.phase} checkpoint")
    primary = config.training.granularity
    stores = {primary: RecordStore(primary, config.training.tolerance)}
    for g in extra_granularities:
        stores.setdefault(g, RecordStore(g, config.training.tolerance))
    log: list[EpochLog] = []
    _run_phase(state, data, stores, primary, "pretrain",
               config.training.pretrain_epochs, apply_bounds=False,
               lr_scale=1.0, log=log, out_dir=out_dir, progress=progress)
    extra = {g: s for g, s in stores.items() if g != primary}
    return TrainOutcome(state=state, store=stores[primary], log=log, extra_stores=extra)


def finetune(state: TrainState, store: RecordStore, config: RunConfig,
             data: Optional[DataBundle] = None, out_dir=None,
             progress=None) -> TrainOutcome:
    """Stage two: boundary-masked training with policy-gated record updates."""
    data = data or prepare_data(config)
    if store.granularity != config.training.granularity:
        raise ValueError(
            f"store granularity {store.granularity} does not match config "
            f"{config.training.granularity}")
    if state.phase == "pretrain":
        state.phase = "finetune"
        state.epoch = 0
        state.opt = Adam(state.model.named_params())  # fresh moments for stage two
    log: list[EpochLog] = []
    _run_phase(state, data, {store.granularity: store}, store.granularity,
               "finetune", config.training.finetune_epochs, apply_bounds=True,
               lr_scale=config.training.finetune_lr_scale, log=log,
               out_dir=out_dir, progress=progress)
    return TrainOutcome(state=state, store=store, log=log)


def ground_truth_store(config: RunConfig, data: DataBundle) -> RecordStore:
    """Frozen store holding true token end frames in subsampled units."""
    factor = config.model.subsample_factor
    boundaries = {}
    lengths = {}
    for utt in data.train:
        boundaries[utt.utterance_id] = [
            (b + factor - 1) // factor for b in utt.boundaries]
        lengths[utt.utterance_id] = (utt.num_frames + factor - 1) // factor
    return fixed_store_from_boundaries(
        boundaries, lengths, granularity=config.training.granularity,
        tolerance=config.training.tolerance)


def run_fixed_mlt(state: TrainState, config: RunConfig,
                  data: Optional[DataBundle] = None, out_dir=None,
                  progress=None) -> TrainOutcome:
    """Fine-tuning against frozen ground-truth boundaries."""
    data = data or prepare_data(config)
    store = ground_truth_store(config, data)
    return finetune(state, store, config, data, out_dir=out_dir, progress=progress)


def run_baseline(state: TrainState, store: RecordStore, config: RunConfig,
                 data: Optional[DataBundle] = None, out_dir=None,
                 progress=None) -> TrainOutcome:
    """Unmasked continuation over the fine-tuning budget, for comparisons.

    Uses the fine-tuning learning rate so the only difference from the
    masked modes is the absence of boundary restrictions.
    """
    data = data or prepare_data(config)
    if state.phase == "pretrain":
        state.phase = "finetune"
        state.epoch = 0
        state.opt = Adam(state.model.named_params())
    log: list[EpochLog] = []
    _run_phase(state, data, {store.granularity: store}, store.granularity,
               "pretrain", config.training.finetune_epochs, apply_bounds=False,
               lr_scale=config.training.finetune_lr_scale, log=log,
               out_dir=out_dir, progress=progress)
    return TrainOutcome(state=state, store=store, log=log)


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepRow:
    axis: str
    value: str
    mode: str
    dev_token_error_rate: float
    dev_delta_corpus: float
    pre_token_error_rate: float
    pre_delta_corpus: float
    seed: int
    error: str = ""


def sweep(config: RunConfig, axis: str, values: Sequence,
          data: Optional[DataBundle] = None,
          pretrained: Optional[TrainOutcome] = None,
          progress=None) -> tuple[list[SweepRow], TrainOutcome, list[str]]:
    """Fine-tune per axis value from one shared pre-trained checkpoint.

    For the offset axis every value runs in both the self-regularised and
    fixed-boundary modes; the granularity axis re-uses per-granularity
    record stores captured during the single pre-training pass. Member-run
    failures are recorded per row and reported after the remaining values
    finish.
    """
    if axis not in ("delta", "granularity"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    data = data or prepare_data(config)
    if pretrained is None:
        extra = tuple(values) if axis == "granularity" else ()
        pretrained = pretrain(config, data, extra_granularities=extra,
                              progress=progress)
    pre_eval = evaluate_model(pretrained.state.model, data.dev,
                              config.run.max_decode_steps)
    rows: list[SweepRow] = []
    errors: list[str] = []
    for value in values:
        if axis == "delta":
            runs = [("srmlt", int(value)), ("fixed-mlt", int(value))]
        else:
            runs = [("srmlt", str(value))]
        for mode, v in runs:
            if axis == "delta":
                cfg = replace(config, training=replace(config.training, delta=v))
                granularity = config.training.granularity
            else:
                cfg = replace(config, training=replace(config.training, granularity=v))
                granularity = v
            try:
                branch = clone_state(pretrained.state)
                branch.config = cfg
                if mode == "fixed-mlt":
                    out = run_fixed_mlt(branch, cfg, data, progress=progress)
                else:
                    if axis == "granularity" and granularity != config.training.granularity:
                        store = clone_store(pretrained.extra_stores[granularity])
                    else:
                        store = clone_store(pretrained.store)
                    out = finetune(branch, store, cfg, data, progress=progress)
                ev = evaluate_model(out.state.model, data.dev, cfg.run.max_decode_steps)
                rows.append(SweepRow(
                    axis=axis, value=str(value), mode=mode,
                    dev_token_error_rate=ev.token_error_rate,
                    dev_delta_corpus=ev.delta_corpus,
                    pre_token_error_rate=pre_eval.token_error_rate,
                    pre_delta_corpus=pre_eval.delta_corpus,
                    seed=config.run.seed))
            except Exception as exc:  # keep sweeping the remaining values
                msg = f"{axis}={value} mode={mode}: {exc}"
                errors.append(msg)
                rows.append(SweepRow(
                    axis=axis, value=str(value), mode=mode,
                    dev_token_error_rate=float("nan"),
                    dev_delta_corpus=float("nan"),
                    pre_token_error_rate=pre_eval.token_error_rate,
                    pre_delta_corpus=pre_eval.delta_corpus,
                    seed=config.run.seed, error=str(exc)))
    return rows, pretrained, errors
