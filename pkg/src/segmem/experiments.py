"""Preset experiment configurations and a small run driver.

These are the desk-scale reproduction presets used by the acceptance
suite: a reduced model (2 layers, hidden 64) trained on a curriculum up to
20 pairs and evaluated out to 200, chosen to fit a single-core CPU budget.
The full-scale preset (4 layers, hidden 128, curriculum to 50, eval to
500) is provided for machines with more compute.
"""

from __future__ import annotations

import json
from pathlib import Path

from .checkpoint import load_checkpoint
from .models import ModelConfig
from .trainer import CurriculumStage, TrainConfig, TrainResult, train

REDUCED_REWRITE_SCHEDULE = (1, 2, 3, 5, 10, 20)
REDUCED_REMEMBER_SCHEDULE = (1, 2, 3, 5, 10, 20)
REDUCED_EVAL_GRID = (10, 20, 50, 100, 200)
FULL_REWRITE_EVAL_GRID = (10, 20, 50, 100, 200, 500)


def reduced_model_config(variant: str) -> ModelConfig:
    return ModelConfig(
        variant=variant,
        layers=2,
        hidden=64,
        heads=4,
        mem_tokens=4,
        d_mem=32,
        vocab=20,
        segment_len=16,
    )


def full_model_config(variant: str) -> ModelConfig:
    return ModelConfig(variant=variant, layers=4, hidden=128, heads=4, mem_tokens=10, d_mem=32)


def reduced_train_config(
    variant: str,
    task: str,
    seed: int,
    output_dir: str | Path,
    steps_per_stage: int = 3000,
    final_stage_steps: int = 6000,
) -> TrainConfig:
    """Pilot-tuned reduced pipeline; the last stage gets a larger budget
    because it does the real length generalization work."""
    schedule = REDUCED_REWRITE_SCHEDULE if task == "rewrite" else REDUCED_REMEMBER_SCHEDULE
    stages = tuple(
        CurriculumStage(n, final_stage_steps if i == len(schedule) - 1 else steps_per_stage, "uniform_up_to")
        for i, n in enumerate(schedule)
    )
    return TrainConfig(
        task=task,
        model=reduced_model_config(variant),
        stages=stages,
        batch_size=32,
        lr=1e-3,
        warmup_steps=200,
        advance_em=0.95,
        eval_every=250,
        val_samples=1024,
        log_every=50,
        seed=seed,
        output_dir=str(output_dir),
    )


def run_or_load(cfg: TrainConfig, echo: bool = False) -> Path:
    """Train unless this run's final checkpoint already exists."""
    from .trainer import resolve_output_dir

    final = resolve_output_dir(cfg.output_dir) / "final.ckpt"
    if final.exists():
        return final
    result = train(cfg, echo=echo)
    return result.checkpoint_path


def acceptance_runs(root: str | Path) -> dict[tuple[str, str, int], TrainConfig]:
    """All (task, variant, seed) training runs the acceptance criteria need."""
    root = Path(root)
    runs: dict[tuple[str, str, int], TrainConfig] = {}
    for task, variants in (
        ("rewrite", ("armt", "armt_no_gamma", "rmt")),
        ("remember", ("armt", "rmt", "prmt")),
    ):
        for variant in variants:
            for seed in (0, 1, 2):
                out = root / task / variant / f"seed{seed}"
                runs[(task, variant, seed)] = reduced_train_config(variant, task, seed, out)
    return runs
