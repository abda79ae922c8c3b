"""End-to-end runs: dataset, base, SFT-stage method, RL, evaluation and drift reports.

Each stage reloads its input checkpoint from disk, so a run that reuses a
cached base sees exactly the same float32 parameters as one that trained it.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import shutil
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, tasks
from .config import ExperimentConfig, apply_overrides
from .exceptions import DomainError
from .model import MicroTransformer, load_checkpoint, save_checkpoint
from .model.sampling import greedy_batch
from .rl import train_rl
from .training import pretrain, train_sft

STAGES = ("data", "base", "sft", "rl", "eval")
_STREAM_IDS = {"base": 0, "sft": 1, "rl": 2, "eval": 3}
_FAMILY_LEN = {"mod-addition": (2, 4), "digit-sort": (2, 4), "parenthesis-balance": (2, 6)}


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator per (seed, stage), so skipping a stage never shifts another's draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_IDS[stage]]))


class MetricsWriter:
    """Appends JSON lines tagged with ``{stage, step, seed, config_hash}``."""

    def __init__(self, path, seed: int, config_hash: str):
        self.path = Path(path)
        self.seed = seed
        self.config_hash = config_hash
        self._fh = self.path.open("a")

    def write(self, stage: str, step: int, values: dict) -> None:
        row = {"stage": stage, "step": int(step), "seed": self.seed, "config_hash": self.config_hash}
        row.update({k: v for k, v in values.items() if k not in ("step", "epoch")})
        if "epoch" in values:
            row["epoch"] = values["epoch"]
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def base_specs(config: ExperimentConfig) -> list[tasks.TaskSpec]:
    """Task families in the pre-training mix; the run's own task stands in for its family."""
    out = []
    for fam in config.base.families:
        if fam == config.task.family:
            out.append(config.task)
        else:
            lo, hi = _FAMILY_LEN[fam]
            out.append(tasks.TaskSpec(fam, min_len=lo, max_len=hi, chain_style=config.task.chain_style))
    return out


def make_dataset(config: ExperimentConfig) -> tasks.DatasetSplits:
    return tasks.generate_dataset(config.task, config.sizes, config.data_seed)


def build_base(config: ExperimentConfig, data: tasks.DatasetSplits, directory, on_step=None) -> Path:
    """Pre-train the base on a mixed corpus that excludes every dataset instance, then save it."""
    held_out = {i.seed_index for s in tasks.SPLITS for i in data.split(s)}
    corpus = tasks.pretraining_corpus(
        base_specs(config), config.base.pretrain.corpus_size, config.base.seed,
        config.base.pretrain.noise_permille, exclude={config.task: held_out},
    )
    m = config.model
    model = MicroTransformer(tasks.VOCAB.size, m.width, m.n_heads, m.n_layers, m.context_length,
                             m.mlp_ratio, seed=config.base.seed)
    pretrain(model, corpus, tasks.VOCAB, config.base.pretrain, stage_rng(config.base.seed, "base"), on_step)
    return save_checkpoint(model, directory, tasks.VOCAB, seed=config.base.seed,
                           extra={"stage": "base", "families": list(config.base.families)})


def sft_sequences(config: ExperimentConfig, data: tasks.DatasetSplits):
    seqs = []
    for split in config.sft_splits:
        seqs += data.sequences(split)
    return seqs


def greedy_accuracy(model, instances, spec: tasks.TaskSpec, vocab=tasks.VOCAB) -> float:
    contexts = [(vocab.bos, *inst.sequence.prompt) for inst in instances]
    outs = greedy_batch(model, contexts, spec.max_response_len, vocab.eos)
    return float(np.mean([tasks.reward(spec, inst.sequence.prompt, r) for inst, r in zip(instances, outs)]))


def evaluate_checkpoint(model, data: tasks.DatasetSplits, config: ExperimentConfig, rng) -> dict:
    instances = data.split(config.eval.split)
    rep = analysis.evaluate_pass_at_k(model, instances, config.task, rng, config.eval.n_samples,
                                      config.eval.ks, config.eval.temperature)
    return {"pass_at_k": rep, "greedy_accuracy": greedy_accuracy(model, instances, config.task)}


def _content_hash(manifest: dict) -> str:
    d = json.loads(json.dumps(manifest))
    d.pop("content_hash", None)
    d.get("config", {}).pop("out", None)
    for st in d.get("stages", {}).values():
        st.pop("wall_clock_s", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


class _Run:
    def __init__(self, config: ExperimentConfig, out: Path):
        self.config = config
        self.out = out
        self.manifest = {
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "code_version": __version__,
            "status": "running",
            "failed_stage": None,
            "dataset_hash": None,
            "checkpoints": {},
            "reports": {},
            "stages": {},
        }

    def save(self) -> None:
        self.manifest["content_hash"] = _content_hash(self.manifest)
        (self.out / "run_manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def stage(self, name: str, fn):
        self.manifest["stages"][name] = {"status": "running"}
        self.save()
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            self.manifest["stages"][name].update(status="failed", error=f"{type(exc).__name__}: {exc}",
                                                 wall_clock_s=time.perf_counter() - t0)
            self.manifest["status"] = "failed"
            self.manifest["failed_stage"] = name
            self.save()
            raise
        self.manifest["stages"][name].update(status="ok", wall_clock_s=time.perf_counter() - t0)
        self.save()
        return result

    def skip(self, name: str, reason: str) -> None:
        self.manifest["stages"][name] = {"status": "skipped", "reason": reason}
        self.save()


def prepare_output(out, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"output directory {out} exists; pass overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_pipeline(config: ExperimentConfig, overwrite: bool = False) -> dict:
    """Run every stage and return the finalized manifest.

    ``rl.epochs = 0`` (with no ``rl.max_steps``) stops after the SFT stage.
    """
    out = prepare_output(config.out, overwrite)
    config.save(out / "config.json")
    run = _Run(config, out)
    run.save()
    metrics = MetricsWriter(out / "metrics.jsonl", config.seed, run.manifest["config_hash"])
    ckpts = run.manifest["checkpoints"]
    try:
        data = run.stage("data", lambda: _stage_data(config, out))
        run.manifest["dataset_hash"] = data.content_hash()

        def do_base():
            path = _stage_base(config, data, out, metrics)
            ckpts["base"] = str(path if config.base_checkpoint else path.relative_to(out))
            return load_checkpoint(path)[0]

        base = run.stage("base", do_base)

        def do_sft():
            model = base.copy()
            params, history = train_sft(
                model, sft_sequences(config, data), tasks.VOCAB, config.sft, stage_rng(config.seed, "sft"),
                base=base, val_seqs=data.sequences("validation"),
                on_epoch=lambda row: metrics.write("sft", row["epoch"], row),
            )
            for row in history:
                if row.get("selected"):
                    metrics.write("sft", row["epoch"], {"selected_epoch": row["epoch"]})
            model.params[:] = params
            save_checkpoint(model, out / "sft", tasks.VOCAB, seed=config.seed,
                            extra={"stage": "sft", "method": config.sft.method})
            ckpts["sft"] = "sft"
            return load_checkpoint(out / "sft")[0]

        sft_model = run.stage("sft", do_sft)

        rl_model = None
        if config.rl.epochs == 0 and config.rl.max_steps is None:
            run.skip("rl", "rl.epochs = 0")
        else:
            def do_rl():
                model, _ = train_rl(out / "sft", data.split("rl"), config.task, config.rl,
                                    stage_rng(config.seed, "rl"),
                                    on_step=lambda row: metrics.write("rl", row["step"], row))
                save_checkpoint(model, out / "rl", tasks.VOCAB, seed=config.seed, extra={"stage": "rl"})
                ckpts["rl"] = "rl"
                return load_checkpoint(out / "rl")[0]

            rl_model = run.stage("rl", do_rl)

        def do_eval():
            return _stage_eval(config, data, out, metrics, run.manifest["reports"],
                               {"base": base, "sft": sft_model, "rl": rl_model})

        run.stage("eval", do_eval)
        run.manifest["status"] = "complete"
        run.save()
    finally:
        metrics.close()
    return run.manifest


def _stage_data(config, out):
    data = make_dataset(config)
    data.save(out / "data")
    return data


def _stage_base(config, data, out, metrics) -> Path:
    if config.base_checkpoint:
        cached = Path(config.base_checkpoint)
        if (cached / "manifest.json").exists():
            _, _, man = load_checkpoint(cached)
            metrics.write("base", 0, {"loaded": True, "params_sha256": man["params_sha256"]})
            return cached
        target = cached
    else:
        target = out / "base"
    build_base(config, data, target,
               on_step=lambda row: metrics.write("pretrain", row["step"], row))
    _, _, man = load_checkpoint(target)
    metrics.write("base", 0, {"loaded": False, "params_sha256": man["params_sha256"]})
    return target


def _stage_eval(config, data, out, metrics, reports, models):
    rdir = out / "reports"
    rdir.mkdir(exist_ok=True)
    rng = stage_rng(config.seed, "eval")
    summary = {}
    for name, model in models.items():
        if model is None:
            continue
        res = evaluate_checkpoint(model, data, config, rng)
        rep = res["pass_at_k"]
        (rdir / f"pass_at_k_{name}.json").write_text(rep.to_json())
        reports[f"pass_at_k_{name}"] = f"reports/pass_at_k_{name}.json"
        row = {"checkpoint": name, "greedy_accuracy": res["greedy_accuracy"],
               **{f"pass@{k}": v for k, v in rep.estimates.items()}}
        metrics.write("eval", 0, row)
        summary[name] = row
    val = data.sequences(config.eval.split)
    pairs = [("base->sft", "base", "sft"), ("sft->rl", "sft", "rl")]
    for label, a, b in pairs:
        if models.get(a) is None or models.get(b) is None:
            continue
        rep = analysis.consistency_report(models[a], models[b], val, label, config.eval.topk,
                                          config.eval.kl_direction)
        fname = f"consistency_{a}_{b}.json"
        (rdir / fname).write_text(rep.to_json())
        reports[f"consistency_{label}"] = f"reports/{fname}"
        row = rep.to_dict()
        row["pair"] = row.pop("stage")
        row.pop("schema_version")
        metrics.write("analysis", 0, row)
    return summary


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def sweep_beta(config: ExperimentConfig, betas, seeds, out, overwrite: bool = False,
               run_fn=run_pipeline) -> list[dict]:
    """GIFT runs over ``betas`` x ``seeds`` sharing data and base; writes ``sweep.csv``.

    A failed cell is recorded with ``status=failed`` and the sweep moves on.
    """
    out = prepare_output(out, overwrite)
    if not config.base_checkpoint:
        config = dataclasses.replace(config, base_checkpoint=str(out / "base"))
    ks = list(config.eval.ks)
    cols = ["row_type", "beta", "seed", "status"] + [f"pass@{k}" for k in ks] + ["greedy_accuracy", "error"]
    rows = []
    for beta in betas:
        for seed in seeds:
            cell = apply_overrides(config, ["sft.method=gift", f"sft.beta={float(beta)}",
                                            f"seed={int(seed)}", f"out={out / f'beta{beta}_seed{seed}'}"])
            row = {"row_type": "cell", "beta": float(beta), "seed": int(seed)}
            try:
                manifest = run_fn(cell, overwrite=True)
                ev = [m for m in read_metrics(Path(cell.out) / "metrics.jsonl") if m["stage"] == "eval"]
                final = ev[-1]
                row.update(status="ok", greedy_accuracy=final["greedy_accuracy"],
                           **{f"pass@{k}": final[f"pass@{k}"] for k in ks})
                if manifest.get("status") != "complete":
                    row["status"] = "failed"
            except Exception as exc:
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    for beta in betas:
        ok = [r for r in rows if r["beta"] == float(beta) and r["status"] == "ok"]
        med = {"row_type": "median", "beta": float(beta), "seed": "", "status": "ok" if ok else "failed"}
        for c in [f"pass@{k}" for k in ks] + ["greedy_accuracy"]:
            med[c] = float(np.median([r[c] for r in ok])) if ok else ""
        rows.append(med)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows


def require_complete(manifest: dict) -> None:
    if manifest.get("status") != "complete":
        raise DomainError(f"run failed at stage {manifest.get('failed_stage')}")
