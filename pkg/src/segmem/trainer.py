"""Curriculum training engine.

Training walks a schedule of stages with nondecreasing pair counts. Within
a stage, each batch is freshly generated; in ``uniform_up_to`` mode the
batch's pair count is drawn uniformly from [1, stage.n_pairs], which helps
length generalization. A stage advances early once validation exact match
reaches the threshold, otherwise when its step budget runs out (with a
warning). Every batch is a pure function of (config seed, stage index,
step index), so runs are reproducible and resume exactly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evaluator
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError
from .models import ModelConfig, SegmentRecurrentModel, build_model
from .nn import Adam, AdamHyper
from .tasks import TASKS, batch_tensors, generate

REMEMBER_SCHEDULE = (1, 2, 3, 5, 10, 20, 40, 50, 200)
REWRITE_SCHEDULE = (1, 2, 3, 5, 10, 20, 40, 50)

STAGE_MODES = ("fixed", "uniform_up_to")

# Seed-space regions keep training, validation, and sweep samples disjoint.
TRAIN_REGION = 0
VAL_REGION = 1
SWEEP_REGION = 2


def derive_seed(region: int, *key: int) -> int:
    """62-bit seed from a key tuple, tagged with a region so the sample
    streams for different purposes can never collide."""
    h = int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0]) >> 2
    return (region << 62) | h


@dataclass(frozen=True)
class CurriculumStage:
    n_pairs: int
    steps: int
    mode: str = "uniform_up_to"

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError(f"stage n_pairs must be >= 1, got {self.n_pairs}")
        if self.steps < 0:
            raise ConfigError(f"stage steps must be >= 0, got {self.steps}")
        if self.mode not in STAGE_MODES:
            raise ConfigError(f"stage mode must be one of {STAGE_MODES}, got {self.mode!r}")


def default_stages(task: str, steps_per_stage: int = 4000, mode: str = "uniform_up_to") -> tuple[CurriculumStage, ...]:
    schedule = REMEMBER_SCHEDULE if task == "remember" else REWRITE_SCHEDULE
    return tuple(CurriculumStage(n, steps_per_stage, mode) for n in schedule)


@dataclass(frozen=True)
class TrainConfig:
    task: str
    model: ModelConfig
    stages: tuple[CurriculumStage, ...]
    value_len: int = 1
    batch_size: int = 64
    lr: float = 1e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    advance_em: float = 0.95
    eval_every: int = 200
    eval_batch_size: int = 256
    val_samples: int = 1024
    log_every: int = 50
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs/default"
    bptt_window: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not self.stages:
            raise ConfigError("stages must be non-empty")
        pair_counts = [s.n_pairs for s in self.stages]
        if pair_counts != sorted(pair_counts):
            raise ConfigError("stage pair counts must be nondecreasing")
        for name in ("value_len", "batch_size", "eval_every", "eval_batch_size", "val_samples", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == "float32" else torch.float64

    @property
    def training_n_pairs(self) -> int:
        return self.stages[-1].n_pairs


def resolve_output_dir(output_dir: str | Path) -> Path:
    """Relative output dirs are anchored at $SEGMEM_OUTPUT_ROOT when set."""
    p = Path(output_dir)
    root = os.environ.get("SEGMEM_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def stage_pair_count(stage: CurriculumStage, seed: int, stage_idx: int, step: int) -> int:
    """Pair count for one batch; uniform over [1, n_pairs] in uniform mode."""
    if stage.mode == "fixed":
        return stage.n_pairs
    rng = np.random.Generator(np.random.PCG64(derive_seed(TRAIN_REGION, seed, stage_idx, step)))
    return int(rng.integers(1, stage.n_pairs + 1))


def make_train_batch(cfg: TrainConfig, stage: CurriculumStage, stage_idx: int, step: int):
    n = stage_pair_count(stage, cfg.seed, stage_idx, step)
    samples = [
        generate(cfg.task, n, cfg.value_len, derive_seed(TRAIN_REGION, cfg.seed, stage_idx, step, i))
        for i in range(cfg.batch_size)
    ]
    return batch_tensors(samples)


def validation_samples(cfg: TrainConfig, n_pairs: int):
    return [
        generate(cfg.task, n_pairs, cfg.value_len, derive_seed(VAL_REGION, cfg.seed, n_pairs, i))
        for i in range(cfg.val_samples)
    ]


def validation_em(model: SegmentRecurrentModel, cfg: TrainConfig, n_pairs: int) -> float:
    samples = validation_samples(cfg, n_pairs)
    return evaluator.exact_match_of_model(model, samples, batch_size=cfg.eval_batch_size)


@dataclass
class StageReport:
    stage_idx: int
    n_pairs: int
    steps_run: int
    final_em: float
    advanced_early: bool
    budget_exhausted_warning: bool
    em_history: list[float] = field(default_factory=list)
    final_loss: float | None = None


def advance_policy(em: float, budget_exhausted: bool, threshold: float) -> tuple[str, bool]:
    """(decision, warning): advance once EM clears the threshold, or with a
    warning once the step budget is spent; otherwise repeat."""
    if em >= threshold:
        return "advance", False
    if budget_exhausted:
        return "advance", True
    return "repeat", False


class MetricsLog:
    """JSONL event stream: {step, stage, loss, em, lr, wall_ms}."""

    def __init__(self, path: Path | None, echo: bool = False):
        self.path = path
        self.echo = echo
        self._f = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._f = path.open("a", encoding="utf-8")

    def write(self, **event) -> None:
        line = json.dumps(event)
        if self._f is not None:
            self._f.write(line + "\n")
            self._f.flush()
        if self.echo:
            print(line, flush=True)

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None


def lr_at(cfg: TrainConfig, global_step: int) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (global_step + 1) / cfg.warmup_steps)


def run_stage(
    model: SegmentRecurrentModel,
    optimizer: Adam,
    stage: CurriculumStage,
    cfg: TrainConfig,
    stage_idx: int,
    log: MetricsLog,
    global_step: int = 0,
    last_good_path: Path | None = None,
) -> tuple[StageReport, int]:
    """Run one curriculum stage; returns its report and the new global step.

    Divergence (non-finite loss) writes a checkpoint of the last good state
    and raises DivergenceError.
    """
    report = StageReport(stage_idx, stage.n_pairs, 0, 0.0, False, False)
    if stage.steps == 0:
        return report, global_step

    def snapshot():
        if last_good_path is not None:
            save_checkpoint(
                last_good_path, model, optimizer,
                extra={"stage_idx": stage_idx, "global_step": global_step, "kind": "last_good"},
            )

    snapshot()
    step = 0
    while step < stage.steps:
        t0 = time.perf_counter()
        lr = lr_at(cfg, global_step)
        segments, masks, _ = make_train_batch(cfg, stage, stage_idx, step)
        loss, _, _ = model.forward_sequence(segments, masks, bptt_window=cfg.bptt_window)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at stage {stage_idx} step {step}", checkpoint_path=last_good_path
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr=lr)
        step += 1
        global_step += 1
        wall_ms = (time.perf_counter() - t0) * 1e3
        loss_val = loss.item()
        report.final_loss = loss_val
        if step % cfg.log_every == 0 or step == 1:
            log.write(step=global_step, stage=stage_idx, loss=loss_val, em=None, lr=lr, wall_ms=round(wall_ms, 3))
        if step % cfg.eval_every == 0 or step == stage.steps:
            em = validation_em(model, cfg, stage.n_pairs)
            report.em_history.append(em)
            report.final_em = em
            log.write(step=global_step, stage=stage_idx, loss=loss_val, em=em, lr=lr, wall_ms=round(wall_ms, 3))
            snapshot()
            decision, warn = advance_policy(em, step >= stage.steps, cfg.advance_em)
            log.write(step=global_step, stage=stage_idx, loss=None, em=em, lr=lr, wall_ms=None,
                      event="advance_policy", decision=decision, warning=warn)
            if decision == "advance":
                report.advanced_early = step < stage.steps
                report.budget_exhausted_warning = warn
                break
    report.steps_run = step
    return report, global_step


def train_config_to_dict(cfg: TrainConfig) -> dict:
    from .checkpoint import model_config_to_dict

    d = {f: getattr(cfg, f) for f in TrainConfig.__dataclass_fields__}
    d["model"] = model_config_to_dict(cfg.model)
    d["stages"] = [{"n_pairs": s.n_pairs, "steps": s.steps, "mode": s.mode} for s in cfg.stages]
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    """Strict parse of the JSON training config; unknown or ill-typed
    fields raise ConfigError naming the field."""
    from .checkpoint import model_config_from_dict
    from .errors import CheckpointError

    if not isinstance(d, dict):
        raise ConfigError("training config must be a JSON object")
    d = dict(d)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown training config field '{sorted(unknown)[0]}'")
    for req in ("task", "model", "stages"):
        if req not in d:
            raise ConfigError(f"missing required training config field '{req}'")
    try:
        model = model_config_from_dict(d.pop("model"))
    except (CheckpointError, TypeError) as e:
        raise ConfigError(f"model: {e}") from None
    stages = []
    raw_stages = d.pop("stages")
    if not isinstance(raw_stages, list):
        raise ConfigError("stages: expected a list of stage objects")
    for i, s in enumerate(raw_stages):
        if not isinstance(s, dict) or not set(s) <= {"n_pairs", "steps", "mode"}:
            bad = sorted(set(s) - {"n_pairs", "steps", "mode"})[0] if isinstance(s, dict) else s
            raise ConfigError(f"stages[{i}]: unknown field '{bad}'")
        try:
            stages.append(CurriculumStage(**s))
        except (ConfigError, TypeError) as e:
            raise ConfigError(f"stages[{i}]: {e}") from None
    try:
        return TrainConfig(model=model, stages=tuple(stages), **d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    reports: list[StageReport]
    config: TrainConfig


def train(cfg: TrainConfig, resume: str | Path | None = None, echo: bool = False) -> TrainResult:
    """Fold run_stage over the curriculum, checkpointing at stage boundaries."""
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    log = MetricsLog(metrics_path, echo=echo)
    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

    start_stage = 0
    global_step = 0
    if resume is not None:
        bundle = load_checkpoint(resume, expected_config=cfg.model)
        model = bundle.model.to(cfg.dtype)
        optimizer = bundle.optimizer
        if optimizer is None:
            optimizer = Adam(model.named_parameters(), hyper)
        else:
            optimizer.hyper = hyper
        start_stage = int(bundle.extra["stage_idx"]) + 1
        global_step = int(bundle.extra["global_step"])
    else:
        model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
        optimizer = Adam(model.named_parameters(), hyper)

    reports: list[StageReport] = []
    for stage_idx in range(start_stage, len(cfg.stages)):
        stage = cfg.stages[stage_idx]
        report, global_step = run_stage(
            model, optimizer, stage, cfg, stage_idx, log,
            global_step=global_step, last_good_path=out / "last_good.ckpt",
        )
        reports.append(report)
        save_checkpoint(
            out / f"stage_{stage_idx:02d}.ckpt", model, optimizer,
            extra={"stage_idx": stage_idx, "global_step": global_step,
                   "task": cfg.task, "seed": cfg.seed, "n_pairs": stage.n_pairs,
                   "final_em": report.final_em},
        )
    final_path = out / "final.ckpt"
    save_checkpoint(
        final_path, model, optimizer,
        extra={"stage_idx": len(cfg.stages) - 1, "global_step": global_step,
               "task": cfg.task, "seed": cfg.seed,
               "training_n_pairs": cfg.training_n_pairs,
               "final_em": reports[-1].final_em if reports else None},
    )
    log.close()
    return TrainResult(final_path, metrics_path, reports, cfg)
