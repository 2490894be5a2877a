"""Synthetic monotonic transduction task with known token boundaries.

Each utterance is a sequence of class-tagged frame bursts: token ``c`` emits
a uniform-random number of frames drawn around class mean ``mu_c`` with
isotropic Gaussian noise, followed by optional trailing silence (zero mean).
The last frame of each token's burst is its ground-truth boundary, which is
what latency is scored against. Generation is pure given the seed, so
datasets regenerate bit-identically.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

DATASET_FORMAT_VERSION = 1


@dataclass
class TaskSpec:
    vocab_size: int = 20
    feature_dim: int = 8
    frames_per_token: tuple[int, int] = (2, 6)
    trailing_silence: tuple[int, int] = (0, 4)
    tokens_per_utterance: tuple[int, int] = (5, 15)
    noise_std: float = 0.3
    seed: int = 1234
    class_means: Optional[np.ndarray] = None  # (vocab, feature_dim)

    def __post_init__(self):
        if self.frames_per_token[0] < 1:
            raise ValueError("tokens must emit at least one frame")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.tokens_per_utterance[0] < 1:
            raise ValueError("utterances need at least one token")
        if self.vocab_size > 2 ** 16:
            raise ValueError(f"vocab of {self.vocab_size} classes is not representable")
        if self.class_means is None:
            rng = np.random.default_rng(self.seed)
            self.class_means = rng.normal(0.0, 1.0, size=(self.vocab_size, self.feature_dim))
        else:
            self.class_means = np.asarray(self.class_means, dtype=np.float64)
            if self.class_means.shape != (self.vocab_size, self.feature_dim):
                raise ValueError("class means must be (vocab, feature_dim)")


@dataclass
class SyntheticUtterance:
    utterance_id: str
    frames: np.ndarray      # (T, feature_dim)
    tokens: list[int]
    boundaries: list[int]   # 1-based last frame of each token's burst

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("utterance needs at least one token")
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise ValueError("boundaries must be strictly increasing")
        if self.boundaries[-1] > self.frames.shape[0]:
            raise ValueError("last boundary exceeds frame count")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def generate(spec: TaskSpec, count: int, id_prefix: str = "utt") -> list[SyntheticUtterance]:
    """Sample ``count`` utterances; deterministic per (seed, index)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed,
                                                           spawn_key=(index,)))
        n_tokens = int(rng.integers(spec.tokens_per_utterance[0],
                                    spec.tokens_per_utterance[1] + 1))
        tokens = [int(t) for t in rng.integers(0, spec.vocab_size, size=n_tokens)]
        chunks = []
        boundaries = []
        total = 0
        for tok in tokens:
            k = int(rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1))
            burst = np.tile(spec.class_means[tok], (k, 1))
            if spec.noise_std > 0:
                burst = burst + rng.normal(0.0, spec.noise_std, size=burst.shape)
            chunks.append(burst)
            total += k
            boundaries.append(total)
        sil = int(rng.integers(spec.trailing_silence[0], spec.trailing_silence[1] + 1))
        if sil > 0:
            silence = np.zeros((sil, spec.feature_dim))
            if spec.noise_std > 0:
                silence = silence + rng.normal(0.0, spec.noise_std, size=silence.shape)
            chunks.append(silence)
        frames = np.concatenate(chunks, axis=0)
        out.append(SyntheticUtterance(
            utterance_id=f"{id_prefix}-{index:06d}",
            frames=frames, tokens=tokens, boundaries=boundaries))
    return out


def split(dataset: Sequence[SyntheticUtterance],
          ratios: Sequence[float]) -> list[list[SyntheticUtterance]]:
    """Deterministic disjoint split, ordered by a stable id hash.

    Split sizes are exact (largest-remainder rounding), and membership
    depends only on utterance ids, so it is stable across runs and machines.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {list(ratios)}")
    n = len(dataset)
    sizes = [int(r * n) for r in ratios]
    remainders = [(r * n - s, i) for i, (r, s) in enumerate(zip(ratios, sizes))]
    for _, i in sorted(remainders, reverse=True)[: n - sum(sizes)]:
        sizes[i] += 1
    if any(s == 0 for s in sizes):
        raise ValueError(f"a split would be empty: sizes {sizes}")

    return _slice_by_hash(dataset, sizes)


def split_counts(dataset: Sequence[SyntheticUtterance],
                 counts: Sequence[int]) -> list[list[SyntheticUtterance]]:
    """Hash-ordered split with exact integer part sizes."""
    if sum(counts) != len(dataset):
        raise ValueError(f"counts {list(counts)} do not cover {len(dataset)} utterances")
    if any(c == 0 for c in counts):
        raise ValueError(f"a split would be empty: counts {list(counts)}")
    return _slice_by_hash(dataset, list(counts))


def _id_hash(utt: SyntheticUtterance) -> str:
    return hashlib.sha256(utt.utterance_id.encode("utf-8")).hexdigest()


def _slice_by_hash(dataset: Sequence[SyntheticUtterance],
                   sizes: Sequence[int]) -> list[list[SyntheticUtterance]]:
    ordered = sorted(dataset, key=lambda u: (_id_hash(u), u.utterance_id))
    parts = []
    offset = 0
    for s in sizes:
        parts.append(ordered[offset:offset + s])
        offset += s
    return parts


# -- dataset file format -----------------------------------------------------
#
# Line-oriented text, one utterance per line:
#   <id>|<tok,tok,...>|<boundary,boundary,...>|<f,f,..;f,f,..;...>
# preceded by a header line "synthetic-dataset v1 <feature_dim>".
# Floats are written with repr so the round trip is lossless.


def save_dataset(dataset: Sequence[SyntheticUtterance], path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        write_dataset(dataset, fp)


def write_dataset(dataset: Sequence[SyntheticUtterance], fp) -> None:
    if not dataset:
        raise ValueError("refusing to write an empty dataset")
    dim = dataset[0].frames.shape[1]
    fp.write(f"synthetic-dataset v{DATASET_FORMAT_VERSION} {dim}\n")
    for utt in dataset:
        tokens = ",".join(str(t) for t in utt.tokens)
        bounds = ",".join(str(b) for b in utt.boundaries)
        rows = ";".join(",".join(repr(float(v)) for v in row) for row in utt.frames)
        fp.write(f"{utt.utterance_id}|{tokens}|{bounds}|{rows}\n")


def load_dataset(path) -> list[SyntheticUtterance]:
    with open(path, "r", encoding="utf-8") as fp:
        return read_dataset(fp)


def read_dataset(fp) -> list[SyntheticUtterance]:
    header = fp.readline().split()
    if len(header) != 3 or header[0] != "synthetic-dataset":
        raise ValueError("not a synthetic dataset file")
    if header[1] != f"v{DATASET_FORMAT_VERSION}":
        raise ValueError(f"unsupported dataset format {header[1]}")
    dim = int(header[2])
    out = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        utt_id, tokens, bounds, rows = line.split("|")
        frames = np.array([[float(v) for v in row.split(",")]
                           for row in rows.split(";")], dtype=np.float64)
        if frames.shape[1] != dim:
            raise ValueError(f"utterance {utt_id}: feature dim {frames.shape[1]} != {dim}")
        out.append(SyntheticUtterance(
            utterance_id=utt_id,
            frames=frames,
            tokens=[int(t) for t in tokens.split(",")],
            boundaries=[int(b) for b in bounds.split(",")]))
    return out
