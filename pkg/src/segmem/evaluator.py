"""Exact-match evaluation, memory-capacity estimation, and length sweeps.

The capacity estimator inverts the expected exact match of an agent that
memorizes exactly k of n pairs and guesses uniformly over v values
otherwise: alpha = k/n + (1 - k/n)/v, hence k = n(v*alpha - 1)/(v - 1).
Sweeps decode answers greedily over a grid of pair counts and report
exact match and estimated capacity per evaluation seed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError
from .models import SegmentRecurrentModel
from .tasks import DASH, N_VALUES, REMEMBER_KEY_LEN, RetrievalSample, batch_tensors, generate

CSV_HEADER = ("model", "task", "n_pairs", "seed", "samples", "em", "estimated_k")
DEFAULT_SEEDS = (0, 1, 2)
EM_GENERALIZATION_THRESHOLD = 0.9


def exact_match(predictions: Sequence[Sequence[int]], answers: Sequence[Sequence[int]]) -> float:
    """Fraction of samples whose full predicted answer sequence is correct."""
    if len(predictions) != len(answers):
        raise ConfigError(f"{len(predictions)} predictions vs {len(answers)} answers")
    if not predictions:
        raise ConfigError("exact_match needs at least one sample")
    hits = sum(tuple(p) == tuple(a) for p, a in zip(predictions, answers))
    return hits / len(predictions)


@dataclass(frozen=True)
class CapacityEstimate:
    k: float
    k_raw: float
    clamped: bool


def capacity_estimate(em: float, n_pairs: int, n_values: int) -> CapacityEstimate:
    """Estimated number of memorized pairs; below-chance EM yields a
    negative raw value that is reported clamped to 0 with the raw preserved."""
    if n_values < 2:
        raise ConfigError(f"n_values must be >= 2, got {n_values}")
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    if not 0.0 <= em <= 1.0:
        raise ConfigError(f"em must be in [0, 1], got {em}")
    k_raw = n_pairs * (n_values * em - 1.0) / (n_values - 1.0)
    return CapacityEstimate(k=max(k_raw, 0.0), k_raw=k_raw, clamped=k_raw < 0.0)


@torch.no_grad()
def decode_answers(
    model: SegmentRecurrentModel,
    samples: Sequence[RetrievalSample],
    batch_size: int = 256,
) -> list[tuple[int, ...]]:
    """Greedy per-token decoding of each sample's answer.

    Pair segments are folded into the carry; the query segment is then run
    repeatedly, growing by one argmax token per step. forward_segment never
    mutates its input carry, so the replays all start from the same state.
    """
    value_len = len(samples[0].answer_value)
    preds: list[tuple[int, ...]] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        segments, _, _ = batch_tensors(chunk)
        carry = model.initial_carry(len(chunk))
        for seg in segments[:-1]:
            _, carry = model.forward_segment(carry, seg)
        cur = torch.tensor([s.query_key + (DASH,) for s in chunk], dtype=torch.long)
        out = []
        for _ in range(value_len):
            logits, _ = model.forward_segment(carry, cur)
            nxt = logits[:, -1].argmax(dim=-1)
            out.append(nxt)
            cur = torch.cat([cur, nxt.unsqueeze(1)], dim=1)
        stacked = torch.stack(out, dim=1)
        preds.extend(tuple(int(t) for t in row) for row in stacked)
    return preds


def exact_match_of_model(
    model: SegmentRecurrentModel,
    samples: Sequence[RetrievalSample],
    batch_size: int = 256,
) -> float:
    preds = decode_answers(model, samples, batch_size=batch_size)
    return exact_match(preds, [s.answer_value for s in samples])


@dataclass(frozen=True)
class EvalPoint:
    n_pairs: int
    samples: int
    em: float
    em_std: float
    estimated_k: float
    estimated_k_std: float
    per_seed_em: tuple[float, ...]
    per_seed_k: tuple[float, ...]


@dataclass
class SweepReport:
    model_id: str
    task: str
    value_len: int
    training_n_pairs: int | None
    points: list[EvalPoint] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    @property
    def generalization_factor(self) -> float | None:
        """Largest pair count solved at >= 0.9 EM over the training count."""
        if not self.training_n_pairs:
            return None
        good = [p.n_pairs for p in self.points if p.em >= EM_GENERALIZATION_THRESHOLD]
        return max(good) / self.training_n_pairs if good else 0.0

    def point(self, n_pairs: int) -> EvalPoint:
        for p in self.points:
            if p.n_pairs == n_pairs:
                return p
        raise KeyError(f"no eval point at n_pairs={n_pairs}")


def sweep_samples(task: str, n_pairs: int, value_len: int, seed: int, count: int) -> list[RetrievalSample]:
    from .trainer import SWEEP_REGION, derive_seed  # local import avoids a cycle

    return [
        generate(task, n_pairs, value_len, derive_seed(SWEEP_REGION, seed, n_pairs, i))
        for i in range(count)
    ]


def sweep(
    model: SegmentRecurrentModel,
    task: str,
    grid: Sequence[int],
    samples_per_point: int = 256,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    value_len: int = 1,
    training_n_pairs: int | None = None,
    batch_size: int = 256,
    model_id: str = "model",
) -> SweepReport:
    """Evaluate EM and estimated capacity over a pair-count grid.

    Grid points beyond the remember keyspace are skipped with a warning
    entry instead of failing the whole sweep.
    """
    if list(grid) != sorted(grid):
        raise ConfigError("sweep grid must be sorted ascending")
    report = SweepReport(model_id, task, value_len, training_n_pairs, seeds=tuple(seeds))
    n_values = N_VALUES**value_len
    for n in grid:
        if task == "remember" and n > N_VALUES**REMEMBER_KEY_LEN:
            report.skipped.append(n)
            continue
        ems, ks = [], []
        for s in seeds:
            samples = sweep_samples(task, n, value_len, s, samples_per_point)
            em = exact_match_of_model(model, samples, batch_size=batch_size)
            ems.append(em)
            ks.append(capacity_estimate(em, n, n_values).k)
        report.points.append(
            EvalPoint(
                n_pairs=n,
                samples=samples_per_point,
                em=float(np.mean(ems)),
                em_std=float(np.std(ems, ddof=1)) if len(ems) > 1 else 0.0,
                estimated_k=float(np.mean(ks)),
                estimated_k_std=float(np.std(ks, ddof=1)) if len(ks) > 1 else 0.0,
                per_seed_em=tuple(ems),
                per_seed_k=tuple(ks),
            )
        )
    return report


def sweep_csv(report: SweepReport) -> str:
    """Per-seed rows under the fixed header; float formatting is pinned so
    identical runs produce byte-identical files."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in report.points:
        for seed, em, k in zip(report.seeds, p.per_seed_em, p.per_seed_k):
            w.writerow(
                [report.model_id, report.task, p.n_pairs, seed, p.samples, f"{em:.6f}", f"{k:.6f}"]
            )
    return buf.getvalue()


@dataclass
class AblationComparison:
    task: str
    grid: tuple[int, ...]
    reports: dict[str, SweepReport | None]
    deltas: dict[str, dict[int, float]]
    verdicts: dict[str, bool | None]
    gaps: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name in sorted(self.reports):
            rep = self.reports[name]
            if rep is None:
                continue
            for p in rep.points:
                for seed, em, k in zip(rep.seeds, p.per_seed_em, p.per_seed_k):
                    w.writerow([name, rep.task, p.n_pairs, seed, p.samples, f"{em:.6f}", f"{k:.6f}"])
        return buf.getvalue()

    def verdict_json(self) -> str:
        return json.dumps(
            {"task": self.task, "grid": list(self.grid), "verdicts": self.verdicts, "gaps": self.gaps},
            indent=1,
            sort_keys=True,
        )


def compare_ablation(
    models: dict[str, SegmentRecurrentModel | None],
    task: str,
    grid: Sequence[int],
    samples_per_point: int = 256,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    value_len: int = 1,
    training_n_pairs: int | None = None,
    batch_size: int = 256,
) -> AblationComparison:
    """Aligned sweeps over a model zoo plus the claim-level verdicts.

    Missing models leave gaps: their rows are absent and any verdict that
    needs them is None.
    """
    reports: dict[str, SweepReport | None] = {}
    gaps = []
    for name, model in models.items():
        if model is None:
            reports[name] = None
            gaps.append(name)
            continue
        reports[name] = sweep(
            model, task, grid, samples_per_point, seeds, value_len,
            training_n_pairs=training_n_pairs, batch_size=batch_size, model_id=name,
        )

    def em_at(name: str, n: int) -> float | None:
        rep = reports.get(name)
        if rep is None:
            return None
        try:
            return rep.point(n).em
        except KeyError:
            return None

    def k_at(name: str, n: int):
        rep = reports.get(name)
        if rep is None:
            return None
        try:
            p = rep.point(n)
            return p.estimated_k, p.estimated_k_std
        except KeyError:
            return None

    deltas: dict[str, dict[int, float]] = {}
    present = [n for n, r in reports.items() if r is not None]
    for i, a in enumerate(present):
        for b in present[i + 1 :]:
            key = f"{a}-{b}"
            deltas[key] = {}
            for n in grid:
                ea, eb = em_at(a, n), em_at(b, n)
                if ea is not None and eb is not None:
                    deltas[key][n] = ea - eb

    evaluated = [p.n_pairs for r in reports.values() if r is not None for p in r.points]
    max_point = max(evaluated) if evaluated else None
    verdicts: dict[str, bool | None] = {
        "armt_em_gt_no_gamma_at_2x": None,
        "armt_k_gt_rmt_at_max": None,
        "armt_k_gt_prmt_at_max": None,
        "prmt_k_le_rmt_plus_std_at_max": None,
    }
    if training_n_pairs:
        far = [n for n in grid if n >= 2 * training_n_pairs]
        if far and em_at("armt", far[-1]) is not None and em_at("armt_no_gamma", far[-1]) is not None:
            verdicts["armt_em_gt_no_gamma_at_2x"] = em_at("armt", far[-1]) > em_at("armt_no_gamma", far[-1])
    if max_point is not None:
        ka, kr, kp = k_at("armt", max_point), k_at("rmt", max_point), k_at("prmt", max_point)
        if ka and kr:
            verdicts["armt_k_gt_rmt_at_max"] = ka[0] > kr[0]
        if ka and kp:
            verdicts["armt_k_gt_prmt_at_max"] = ka[0] > kp[0]
        if kp and kr:
            verdicts["prmt_k_le_rmt_plus_std_at_max"] = kp[0] <= kr[0] + kp[1] + kr[1]
    return AblationComparison(task, tuple(grid), reports, deltas, verdicts, gaps)


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
