"""Command-line entry point: ``giftlab <subcommand> [--config PATH] [--seed N] [--out DIR] [--set k=v]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, oracle, pipeline, tasks
from .config import ExperimentConfig, apply_overrides
from .model import load_checkpoint, save_checkpoint
from .rl import train_rl
from .training import SFT_METHODS, train_sft


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON when possible; repeatable")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="giftlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the dataset splits")
    _global_flags(p)

    p = sub.add_parser("pretrain-base", help="pre-train the base policy")
    _global_flags(p)

    p = sub.add_parser("train-sft", help="run one SFT-stage method from a base checkpoint")
    _global_flags(p)
    p.add_argument("--method", choices=SFT_METHODS)
    p.add_argument("--base", type=Path, required=True, help="base checkpoint directory")

    p = sub.add_parser("train-rl", help="GRPO from a checkpoint")
    _global_flags(p)
    p.add_argument("--init", type=Path, required=True, help="initial checkpoint directory")

    p = sub.add_parser("eval", help="pass@k and greedy accuracy of a checkpoint")
    _global_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("analyze", help="consistency report between two checkpoints")
    _global_flags(p)
    p.add_argument("--earlier", type=Path, required=True)
    p.add_argument("--later", type=Path, required=True)
    p.add_argument("--stage", default="base->sft")

    p = sub.add_parser("oracle", help="run the enumeration oracle suite (JSON lines on stdout)")
    _global_flags(p)
    p.add_argument("--tasks", type=int, default=20)
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("sweep-beta", help="GIFT runs over a grid of beta values and seeds")
    _global_flags(p)
    p.add_argument("--betas", default="1,5,10,20,50")
    p.add_argument("--seeds", default="0,1,2,3,4")

    p = sub.add_parser("run", help="full pipeline")
    _global_flags(p)
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        d = json.loads(args.config.read_text())
    else:
        d = {"seed": 0}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = str(args.out)
    cfg = ExperimentConfig.from_dict(d)
    overrides = list(args.overrides)
    if getattr(args, "method", None):
        overrides.insert(0, f"sft.method={args.method}")
    return apply_overrides(cfg, overrides)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _cmd_gen_data(cfg, args) -> int:
    out = pipeline.prepare_output(cfg.out, args.overwrite)
    data = pipeline.make_dataset(cfg)
    data.save(out / "data")
    _emit({"dataset_hash": data.content_hash(), "sizes": list(cfg.sizes), "path": str(out / "data")})
    return 0


def _cmd_pretrain(cfg, args) -> int:
    out = pipeline.prepare_output(cfg.out, args.overwrite)
    data = pipeline.make_dataset(cfg)
    writer = pipeline.MetricsWriter(out / "metrics.jsonl", cfg.base.seed, cfg.config_hash())
    try:
        path = pipeline.build_base(cfg, data, out / "base",
                                   on_step=lambda row: writer.write("pretrain", row["step"], row))
    finally:
        writer.close()
    _emit({"checkpoint": str(path)})
    return 0


def _cmd_train_sft(cfg, args) -> int:
    out = pipeline.prepare_output(cfg.out, args.overwrite)
    data = pipeline.make_dataset(cfg)
    base, vocab, _ = load_checkpoint(args.base)
    model = base.copy()
    writer = pipeline.MetricsWriter(out / "metrics.jsonl", cfg.seed, cfg.config_hash())
    try:
        params, _ = train_sft(model, pipeline.sft_sequences(cfg, data), tasks.VOCAB, cfg.sft,
                              pipeline.stage_rng(cfg.seed, "sft"), base=base,
                              val_seqs=data.sequences("validation"),
                              on_epoch=lambda row: writer.write("sft", row["epoch"], row))
    finally:
        writer.close()
    model.params[:] = params
    save_checkpoint(model, out / "sft", tasks.VOCAB, seed=cfg.seed, extra={"stage": "sft", "method": cfg.sft.method})
    _emit({"checkpoint": str(out / "sft"), "method": cfg.sft.method})
    return 0


def _cmd_train_rl(cfg, args) -> int:
    out = pipeline.prepare_output(cfg.out, args.overwrite)
    data = pipeline.make_dataset(cfg)
    writer = pipeline.MetricsWriter(out / "metrics.jsonl", cfg.seed, cfg.config_hash())
    try:
        model, _ = train_rl(args.init, data.split("rl"), cfg.task, cfg.rl, pipeline.stage_rng(cfg.seed, "rl"),
                            on_step=lambda row: writer.write("rl", row["step"], row))
    finally:
        writer.close()
    save_checkpoint(model, out / "rl", tasks.VOCAB, seed=cfg.seed, extra={"stage": "rl"})
    _emit({"checkpoint": str(out / "rl")})
    return 0


def _cmd_eval(cfg, args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    data = pipeline.make_dataset(cfg)
    res = pipeline.evaluate_checkpoint(model, data, cfg, pipeline.stage_rng(cfg.seed, "eval"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pass_at_k.json").write_text(res["pass_at_k"].to_json())
    _emit({"greedy_accuracy": res["greedy_accuracy"],
           **{f"pass@{k}": v for k, v in res["pass_at_k"].estimates.items()}})
    return 0


def _cmd_analyze(cfg, args) -> int:
    a, _, _ = load_checkpoint(args.earlier)
    b, _, _ = load_checkpoint(args.later)
    data = pipeline.make_dataset(cfg)
    rep = analysis.consistency_report(a, b, data.sequences(cfg.eval.split), args.stage,
                                      cfg.eval.topk, cfg.eval.kl_direction)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "consistency.json").write_text(rep.to_json())
    print(rep.to_json())
    return 0


def _cmd_oracle(cfg, args) -> int:
    results = oracle.run_suite(cfg.seed, n_tasks=args.tasks, trials=args.trials)
    for r in results:
        print(r.to_json())
    return 0 if all(r.passed for r in results) else 1


def _cmd_sweep(cfg, args) -> int:
    betas = [float(b) for b in args.betas.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = pipeline.sweep_beta(cfg, betas, seeds, cfg.out, overwrite=args.overwrite)
    for r in rows:
        _emit(r)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _cmd_run(cfg, args) -> int:
    manifest = pipeline.run_pipeline(cfg, overwrite=args.overwrite)
    _emit({"status": manifest["status"], "content_hash": manifest["content_hash"], "out": str(cfg.out)})
    return 0 if manifest["status"] == "complete" else 1


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain-base": _cmd_pretrain,
    "train-sft": _cmd_train_sft,
    "train-rl": _cmd_train_rl,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "oracle": _cmd_oracle,
    "sweep-beta": _cmd_sweep,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        print(f"giftlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
