"""Command-line entry points.

Exit codes: 0 on success, 2 for configuration errors, 3 when a comparison
verdict fails (for CI gating).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError
from .evaluator import capacity_estimate, compare_ablation, sweep, sweep_csv, write_text
from .tasks import TASKS, generate, write_jsonl
from .trainer import train, train_config_from_dict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERDICT = 3

MODEL_SLOTS = ("armt", "armt_no_gamma", "rmt", "prmt")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_generate_data(args) -> int:
    samples = [
        generate(args.task, args.n_pairs, args.value_len, args.seed + i) for i in range(args.samples)
    ]
    write_jsonl(samples, args.out)
    print(f"wrote {len(samples)} {args.task} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    cfg = train_config_from_dict(raw)
    result = train(cfg, resume=args.resume, echo=args.echo)
    summary = {
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
        "stages": [
            {
                "stage": r.stage_idx,
                "n_pairs": r.n_pairs,
                "steps_run": r.steps_run,
                "final_em": r.final_em,
                "advanced_early": r.advanced_early,
                "budget_warning": r.budget_exhausted_warning,
            }
            for r in result.reports
        ],
    }
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def _load_model(path: str):
    bundle = load_checkpoint(path)
    bundle.model.eval()
    return bundle


def cmd_eval_sweep(args) -> int:
    bundle = _load_model(args.checkpoint)
    task = args.task or bundle.extra.get("task")
    if task not in TASKS:
        raise ConfigError(f"task not stored in checkpoint; pass --task one of {TASKS}")
    training_n = args.training_n_pairs or bundle.extra.get("training_n_pairs")
    report = sweep(
        bundle.model,
        task,
        grid=_int_list(args.grid),
        samples_per_point=args.samples,
        seeds=_int_list(args.seeds),
        value_len=args.value_len,
        training_n_pairs=training_n,
        model_id=args.model_id or bundle.model.config.variant,
    )
    csv_text = sweep_csv(report)
    if args.out:
        write_text(args.out, csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text, end="")
    for n in report.skipped:
        print(f"warning: skipped grid point {n} (exceeds remember keyspace)", file=sys.stderr)
    if report.generalization_factor is not None:
        print(f"generalization_factor={report.generalization_factor:g}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    models = {}
    training_n = args.training_n_pairs
    for slot in MODEL_SLOTS:
        path = getattr(args, slot)
        if path is None:
            models[slot] = None
            continue
        bundle = _load_model(path)
        models[slot] = bundle.model
        if training_n is None:
            training_n = bundle.extra.get("training_n_pairs")
    comparison = compare_ablation(
        models,
        args.task,
        grid=_int_list(args.grid),
        samples_per_point=args.samples,
        seeds=_int_list(args.seeds),
        value_len=args.value_len,
        training_n_pairs=training_n,
    )
    out_dir = Path(args.out_dir)
    write_text(out_dir / "compare.csv", comparison.to_csv())
    write_text(out_dir / "verdicts.json", comparison.verdict_json())
    print(comparison.verdict_json())
    for gap in comparison.gaps:
        print(f"warning: no checkpoint for '{gap}', table has gaps", file=sys.stderr)
    failed = [k for k, v in comparison.verdicts.items() if v is False]
    if failed:
        print(f"verdict failure: {failed}", file=sys.stderr)
        return EXIT_VERDICT
    if args.strict and comparison.gaps:
        print("strict mode: gaps count as failure", file=sys.stderr)
        return EXIT_VERDICT
    return EXIT_OK


def cmd_capacity(args) -> int:
    est = capacity_estimate(args.em, args.n, args.v)
    print(f"{est.k:g}")
    if est.clamped:
        print(f"below chance: raw k = {est.k_raw:g}, reported clamped to 0", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segmem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write task samples as JSONL")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--n-pairs", type=int, required=True)
    g.add_argument("--value-len", type=int, default=1)
    g.add_argument("--samples", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run curriculum training from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--echo", action="store_true", help="echo metric events to stdout")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-sweep", help="exact match / capacity over a pair-count grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=TASKS, default=None)
    e.add_argument("--grid", required=True, help="comma-separated pair counts, ascending")
    e.add_argument("--samples", type=int, default=256)
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--value-len", type=int, default=1)
    e.add_argument("--training-n-pairs", type=int, default=None)
    e.add_argument("--model-id", default=None)
    e.add_argument("--out", default=None, help="CSV output path (stdout when omitted)")
    e.set_defaults(func=cmd_eval_sweep)

    c = sub.add_parser("compare", help="aligned sweeps over the model zoo plus claim verdicts")
    c.add_argument("--task", choices=TASKS, required=True)
    c.add_argument("--grid", required=True)
    for slot in MODEL_SLOTS:
        c.add_argument(f"--{slot.replace('_', '-')}", dest=slot, default=None, help=f"{slot} checkpoint")
    c.add_argument("--samples", type=int, default=256)
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--value-len", type=int, default=1)
    c.add_argument("--training-n-pairs", type=int, default=None)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--strict", action="store_true", help="missing checkpoints also fail the gate")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("capacity", help="closed-form memorized-pair estimate")
    k.add_argument("--em", type=float, required=True)
    k.add_argument("--n", type=int, required=True)
    k.add_argument("--v", type=int, required=True)
    k.set_defaults(func=cmd_capacity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
