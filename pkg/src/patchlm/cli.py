"""Command surface: synth / train / evaluate / analyze / verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
Every emitted artifact embeds the resolved config hash and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _model_config(cfg: dict):
    from .modeling import ModelConfig

    m = cfg["model"]
    return ModelConfig(
        backbones=[dict(b) for b in m["backbones"]],
        projector_hidden=m["projector_hidden"],
        lm_dim=m["lm_dim"],
        lm_depth=m["lm_depth"],
        lm_heads=m["lm_heads"],
        max_context=m["max_context"],
        prompt_style=m["prompt_style"],
        image_scheme=cfg["image"]["scheme"],
        image_resolution=cfg["image"]["resolution"],
    )


def _load_images(data_dir: Path) -> dict:
    from .images import RawImage

    return {p.name: RawImage.open(p) for p in sorted(data_dir.glob("*.png"))}


def _ensure_dataset(cfg: dict, out_dir: Path) -> Path:
    """Return a dataset directory, generating one under out_dir if needed."""
    if cfg["data"]["path"]:
        return Path(cfg["data"]["path"])
    from .data import synth_generate

    data_dir = out_dir / "synth-data"
    synth_generate(
        seed=cfg["seed"],
        n=cfg["data"]["n"],
        canvas=cfg["data"]["canvas"],
        out_dir=data_dir,
        include_language_only=cfg["data"]["include_language_only"],
    )
    return data_dir


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n is not None:
        cfg["data"]["n"] = args.n
    if cfg["data"]["n"] < 1:
        print("synth: n must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    from .data import synth_generate, synth_records
    from .evaluation import tasks_from_records, write_task

    out_dir = Path(args.out or cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    synth_generate(
        seed=cfg["seed"],
        n=cfg["data"]["n"],
        canvas=cfg["data"]["canvas"],
        out_dir=out_dir,
        include_language_only=cfg["data"]["include_language_only"],
    )
    records, _ = synth_records(
        cfg["seed"], cfg["data"]["n"], cfg["data"]["canvas"], cfg["data"]["include_language_only"]
    )
    tasks_dir = out_dir / "tasks"
    tasks_dir.mkdir(exist_ok=True)
    for name, task in tasks_from_records(records).items():
        write_task(tasks_dir / f"{name}.task.jsonl", task)
    meta = {"config": cfg, "config_hash": cfgmod.config_hash(cfg), "seed": cfg["seed"]}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote dataset ({cfg['data']['n']} scenes) to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = Path(args.out or cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    from .checkpoint import save_checkpoint
    from .data import read_dataset
    from .modeling import build_vlm
    from .training import Hyperparameters, make_stage_plan, cost_report, train

    data_dir = _ensure_dataset(cfg, out_dir)
    examples = read_dataset(data_dir / "dataset.jsonl")
    images = _load_images(data_dir)
    align = [ex for ex in examples if ex.task_kind == "caption"]
    instruct = [ex for ex in examples if ex.task_kind != "caption"]

    h = Hyperparameters(
        batch_size=cfg["train"]["batch_size"],
        max_grad_norm=cfg["train"]["max_grad_norm"],
        weight_decay=cfg["train"]["weight_decay"],
        peak_lr=cfg["train"]["peak_lr"],
        warmup_ratio=cfg["train"]["warmup_ratio"],
        adam_beta1=cfg["train"]["adam_beta1"],
        adam_beta2=cfg["train"]["adam_beta2"],
        adam_eps=cfg["train"]["adam_eps"],
    )
    plan = make_stage_plan(cfg["train"]["procedure"], h)
    model = build_vlm(_model_config(cfg), seed=cfg["seed"])
    model, ledger = train(
        plan,
        {"align": align, "instruct": instruct, "all": examples},
        model,
        h,
        seed=cfg["seed"],
        images=images,
        epoch_count=cfg["data"]["epoch_count"],
        include_language_only=cfg["data"]["include_language_only"],
    )

    meta = {"config": cfg, "config_hash": cfgmod.config_hash(cfg), "seed": cfg["seed"]}
    save_checkpoint(out_dir / "checkpoint.bin", model, meta=meta)
    report = {
        "config_hash": meta["config_hash"],
        "seed": cfg["seed"],
        "ledger": ledger.to_dict(),
        "cost_report": cost_report(ledger),
    }
    (out_dir / "ledger.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"trained {cfg['train']['procedure']} for {ledger.total_steps} steps -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import read_task, run_benchmark
    from .images import RawImage

    import numpy as np

    model, header = load_checkpoint(args.model)
    model.eval()
    task = read_task(args.task)
    images_dir = Path(args.images) if args.images else Path(args.task).parent.parent
    blank = RawImage(128 * np.ones((1, 1, 3), dtype=np.uint8))

    def generate(image_ref, prompt):
        img = RawImage.open(images_dir / image_ref) if image_ref else blank
        return model.generate_greedy(img, prompt, max_new=args.max_new).text

    record = run_benchmark(generate, task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        head = {
            "task": record.task_name,
            "accuracy": record.accuracy,
            "config_hash": header["meta"].get("config_hash"),
            "seed": header["meta"].get("seed"),
        }
        f.write(json.dumps(head, sort_keys=True) + "\n")
        for row in record.transcript:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{record.task_name}: accuracy {record.accuracy:.2f} ({len(record.scores)} examples)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    import numpy as np

    from .stats import ScoreTable, compare, emit_report, zscores

    if args.fixture:
        from .fixture import regression_checks

        checks = regression_checks()
        for c in checks:
            status = "PASS" if c["ok"] else "FAIL"
            print(f"[{status}] {c['name']}: {c['detail']}")
        return EXIT_OK if all(c["ok"] for c in checks) else EXIT_RUNTIME

    if not args.scores:
        print("analyze: need --scores files or --fixture", file=sys.stderr)
        return EXIT_USAGE
    tables = [ScoreTable.read(p) for p in args.scores]
    table = tables[0]
    for t in tables[1:]:
        table = ScoreTable(
            table.models + t.models,
            table.benchmarks,
            np.vstack([table.values, t.restrict(benchmarks=table.benchmarks).values]),
        )
    z = zscores(table)
    comparisons = []
    if args.base and args.alt:
        comparisons.append(compare(args.base, args.alt, z))
    report = emit_report(table, z, comparisons, fmt=args.format)
    if args.out:
        Path(args.out).write_text(report)
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_verify(args) -> int:
    """Recompute the config hash embedded in an artifact and compare."""
    path = Path(args.artifact)
    if path.suffix == ".bin":
        from .checkpoint import read_header

        meta = read_header(path)["meta"]
    else:
        text = path.read_text()
        try:
            meta = json.loads(text)
        except json.JSONDecodeError:
            # line-delimited artifacts embed their metadata in the first line
            meta = json.loads(text.splitlines()[0])
    cfg, recorded = meta.get("config"), meta.get("config_hash")
    if cfg is None or recorded is None:
        print(f"verify: {path} does not embed a resolved config + hash", file=sys.stderr)
        return EXIT_USAGE
    actual = cfgmod.config_hash(cfg)
    if actual != recorded:
        print(f"verify: hash mismatch (recorded {recorded}, recomputed {actual})")
        return EXIT_RUNTIME
    print(f"verify: ok ({recorded})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchlm")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset + eval tasks")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model per the configured stage plan")
    common(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a task file")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--images", default=None, help="image directory (default: task dir parent)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-new", type=int, default=48)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="z-score tables, significance tests, reports")
    p.add_argument("--scores", nargs="*", default=[])
    p.add_argument("--base", nargs="*", default=[])
    p.add_argument("--alt", nargs="*", default=[])
    p.add_argument("--format", choices=("table-text", "delimited", "radar-data"), default="table-text")
    p.add_argument("--out", default=None)
    p.add_argument("--fixture", action="store_true", help="run shipped-table regression checks")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="recompute embedded config hashes")
    p.add_argument("artifact")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
