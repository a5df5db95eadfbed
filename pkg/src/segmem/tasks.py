"""Key-value retrieval task generators and tokenization.

Two task families over a 20-token vocabulary (16 value digits plus ':',
',', '-', and padding):

* remember: every key is a unique 3-token sequence; the model must hold
  all pairs and recall the value of the queried key.
* rewrite: keys are single tokens and repeat; the answer is the value of
  the queried key's *last* occurrence, so memory must be overwritten.

A sample renders to one segment per pair (``key : value ,``) followed by a
query segment (``key - answer``); the loss mask covers exactly the answer
tokens. Generation is a pure function of (arguments, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError

N_VALUES = 16
COLON = 16
COMMA = 17
DASH = 18
PAD = 19
VOCAB_SIZE = 20
REMEMBER_KEY_LEN = 3
REWRITE_KEY_LEN = 1

TOKEN_STRINGS = tuple(str(i) for i in range(N_VALUES)) + (":", ",", "-", "<pad>")

TASKS = ("remember", "rewrite")

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class RetrievalSample:
    task: str
    seed: int
    pairs: tuple[tuple[TokenSeq, TokenSeq], ...]
    query_key: TokenSeq
    answer_value: TokenSeq

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class SegmentedSample:
    """Token-level layout of a sample: one segment per pair, then the query
    segment whose loss mask is nonzero exactly on the answer tokens."""

    segments: tuple[TokenSeq, ...]
    query_segment: TokenSeq
    answer_tokens: TokenSeq
    loss_mask: TokenSeq

    @property
    def all_segments(self) -> tuple[TokenSeq, ...]:
        return self.segments + (self.query_segment,)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_remember(n_pairs: int, value_len: int = 1, seed: int = 0) -> RetrievalSample:
    """Unique 3-token keys sampled without replacement; values i.i.d.;
    query uniform over the sample's keys."""
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    keyspace = N_VALUES**REMEMBER_KEY_LEN
    if n_pairs > keyspace:
        raise ConfigError(f"n_pairs={n_pairs} exceeds the {keyspace} unique keys available")
    if value_len < 1:
        raise ConfigError(f"value_len must be >= 1, got {value_len}")
    rng = _rng(seed)
    key_ids = rng.choice(keyspace, size=n_pairs, replace=False)
    keys = []
    for kid in key_ids:
        key = []
        for _ in range(REMEMBER_KEY_LEN):
            key.append(int(kid % N_VALUES))
            kid //= N_VALUES
        keys.append(tuple(key))
    values = [tuple(int(v) for v in rng.integers(0, N_VALUES, size=value_len)) for _ in range(n_pairs)]
    q = int(rng.integers(0, n_pairs))
    return RetrievalSample(
        task="remember",
        seed=seed,
        pairs=tuple(zip(keys, values)),
        query_key=keys[q],
        answer_value=values[q],
    )


def gen_rewrite(n_pairs: int, value_len: int = 1, seed: int = 0) -> RetrievalSample:
    """Single-token keys sampled i.i.d. (collisions intended); the answer is
    the value of the queried key's last occurrence."""
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    if value_len < 1:
        raise ConfigError(f"value_len must be >= 1, got {value_len}")
    rng = _rng(seed)
    keys = [(int(k),) for k in rng.integers(0, N_VALUES, size=n_pairs)]
    values = [tuple(int(v) for v in rng.integers(0, N_VALUES, size=value_len)) for _ in range(n_pairs)]
    present = sorted(set(keys))
    query = present[int(rng.integers(0, len(present)))]
    answer = None
    for k, v in zip(keys, values):
        if k == query:
            answer = v
    assert answer is not None
    return RetrievalSample(
        task="rewrite",
        seed=seed,
        pairs=tuple(zip(keys, values)),
        query_key=query,
        answer_value=answer,
    )


def generate(task: str, n_pairs: int, value_len: int = 1, seed: int = 0) -> RetrievalSample:
    if task == "remember":
        return gen_remember(n_pairs, value_len, seed)
    if task == "rewrite":
        return gen_rewrite(n_pairs, value_len, seed)
    raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


def render(sample: RetrievalSample) -> SegmentedSample:
    """Tokenize into per-pair segments plus the query segment."""
    segments = tuple(key + (COLON,) + value + (COMMA,) for key, value in sample.pairs)
    query_segment = sample.query_key + (DASH,) + sample.answer_value
    mask = (0,) * (len(sample.query_key) + 1) + (1,) * len(sample.answer_value)
    return SegmentedSample(
        segments=segments,
        query_segment=query_segment,
        answer_tokens=sample.answer_value,
        loss_mask=mask,
    )


def parse(rendered: SegmentedSample, task: str, seed: int = 0) -> RetrievalSample:
    """Inverse of render (up to the generator seed)."""
    pairs = []
    for seg in rendered.segments:
        if seg[-1] != COMMA or COLON not in seg:
            raise ConfigError(f"malformed pair segment {seg}")
        sep = seg.index(COLON)
        pairs.append((seg[:sep], seg[sep + 1 : -1]))
    qseg = rendered.query_segment
    if DASH not in qseg:
        raise ConfigError(f"malformed query segment {qseg}")
    sep = qseg.index(DASH)
    return RetrievalSample(
        task=task,
        seed=seed,
        pairs=tuple(pairs),
        query_key=qseg[:sep],
        answer_value=qseg[sep + 1 :],
    )


def pair_segment_len(task: str, value_len: int) -> int:
    key_len = REMEMBER_KEY_LEN if task == "remember" else REWRITE_KEY_LEN
    return key_len + 1 + value_len + 1


def query_segment_len(task: str, value_len: int) -> int:
    key_len = REMEMBER_KEY_LEN if task == "remember" else REWRITE_KEY_LEN
    return key_len + 1 + value_len


def batch_tensors(
    samples: Sequence[RetrievalSample],
) -> tuple[list[torch.Tensor], list[torch.Tensor | None], torch.Tensor]:
    """Stack same-shape samples into per-segment token tensors.

    Returns (segments, loss_masks, answers): `segments` has n_pairs + 1
    entries of shape [batch, seg_len]; only the final (query) segment has a
    non-None mask; `answers` is [batch, value_len].
    """
    rendered = [render(s) for s in samples]
    n_segs = {len(r.all_segments) for r in rendered}
    if len(n_segs) != 1:
        raise ConfigError("batch_tensors needs samples with equal pair counts")
    segments = []
    masks: list[torch.Tensor | None] = []
    for i in range(n_segs.pop() - 1):
        segments.append(torch.tensor([r.segments[i] for r in rendered], dtype=torch.long))
        masks.append(None)
    segments.append(torch.tensor([r.query_segment for r in rendered], dtype=torch.long))
    masks.append(torch.tensor([r.loss_mask for r in rendered], dtype=torch.long))
    answers = torch.tensor([r.answer_tokens for r in rendered], dtype=torch.long)
    return segments, masks, answers


def write_jsonl(samples: Iterable[RetrievalSample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(
                json.dumps(
                    {
                        "task": s.task,
                        "seed": s.seed,
                        "pairs": [[list(k), list(v)] for k, v in s.pairs],
                        "query": list(s.query_key),
                        "answer": list(s.answer_value),
                    }
                )
                + "\n"
            )


def read_jsonl(path: str | Path) -> list[RetrievalSample]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                RetrievalSample(
                    task=d["task"],
                    seed=d["seed"],
                    pairs=tuple((tuple(k), tuple(v)) for k, v in d["pairs"]),
                    query_key=tuple(d["query"]),
                    answer_value=tuple(d["answer"]),
                )
            )
    return out
