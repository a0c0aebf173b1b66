"""Experiment runner.

Single runs, the full encoder/decoder adaptation matrix, accounting
tables, embedding exports, and encoder probes, all driven by a JSON
config plus overriding flags. Every run directory is self-describing:
resolved config, metrics, loss log, best checkpoint, test summary, and
a status file that marks partial runs as failed.

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import accounting
from .analysis import (
    ProbeConfig,
    encoder_probe,
    export_embeddings,
    pca_project,
    write_embedding_csv,
    write_projection_csv,
)
from .checkpoint import checkpoint_from_bytes, load_checkpoint
from .model import ModelConfig, Seq2SeqModel
from .tasks import VOCAB_SIZE, build_suite
from .tensor import ShapeError
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INVARIANT = 4


class ConfigError(ValueError):
    pass


# mode label -> (enc_mode, dec_mode, full_finetune, use_mlp, post_layernorm)
MODES = {
    "full-finetune": ("none", "none", True, True, False),
    "none-none": ("none", "none", False, True, False),
    "manual-manual": ("manual", "manual", False, True, False),
    "manual-task": ("manual", "task", False, True, False),
    "manual-generated": ("manual", "generated", False, True, False),
    "task-manual": ("task", "manual", False, True, False),
    "task-task": ("task", "task", False, True, False),
    "task-generated": ("task", "generated", False, True, False),
    "generated-manual": ("generated", "manual", False, True, False),
    "generated-task": ("generated", "task", False, True, False),
    "generated-generated": ("generated", "generated", False, True, False),
    "manual-generated-no-mlp": ("manual", "generated", False, False, False),
    "manual-generated-postln": ("manual", "generated", False, True, True),
}

MATRIX_MODES = [m for m in MODES if m != "none-none"]


@dataclasses.dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    suite_seed: int = 0
    out_dir: str = "runs/run"
    mode: str = "manual-generated"

    def to_dict(self):
        d = dataclasses.asdict(self.model)
        d["enc_mode"] = self.model.enc_mode.value
        d["dec_mode"] = self.model.dec_mode.value
        return {
            "model": d,
            "train": dataclasses.asdict(self.train),
            "suite_seed": self.suite_seed,
            "out_dir": self.out_dir,
            "mode": self.mode,
        }


def default_config():
    """The desk-scale recipe: small model, 2000 steps, lr tuned for
    training adapters against a randomly initialised frozen base."""
    return ExperimentConfig(
        model=ModelConfig(vocab_size=VOCAB_SIZE, n_tasks=6),
        train=TrainConfig(peak_lr=1e-3),
        suite_seed=0,
        out_dir="runs/run",
        mode="manual-generated",
    )


def _build_section(cls, data, section):
    valid = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in valid:
            raise ConfigError(f"unknown field {section}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def load_config(path=None, overrides=None):
    cfg = default_config()
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fp:
                data = json.load(fp)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for key in data:
        if key not in ("model", "train", "suite_seed", "out_dir", "mode"):
            raise ConfigError(f"unknown field {key}")
    base = cfg.to_dict()
    base["model"].update(data.get("model", {}))
    base["train"].update(data.get("train", {}))
    for key in ("suite_seed", "out_dir", "mode"):
        if key in data:
            base[key] = data[key]
    overrides = overrides or {}
    if overrides.get("mode") is not None:
        base["mode"] = overrides["mode"]
    if overrides.get("seed") is not None:
        base["train"]["seed"] = overrides["seed"]
    if overrides.get("steps") is not None:
        base["train"]["total_steps"] = overrides["steps"]
        base["train"]["warmup_steps"] = min(base["train"]["warmup_steps"], max(base["train"]["total_steps"] // 10, 1))
        base["train"]["eval_every"] = min(base["train"]["eval_every"], base["train"]["total_steps"])
    if overrides.get("out") is not None:
        base["out_dir"] = overrides["out"]
    if base["mode"] not in MODES:
        raise ConfigError(f"unknown mode {base['mode']!r} (field mode)")
    enc, dec, _, use_mlp, post_ln = MODES[base["mode"]]
    base["model"]["enc_mode"] = enc
    base["model"]["dec_mode"] = dec
    base["model"]["use_mlp"] = use_mlp
    base["model"]["adapter_input_post_layernorm"] = post_ln
    model = _build_section(ModelConfig, base["model"], "model")
    train_cfg = _build_section(TrainConfig, base["train"], "train")
    return ExperimentConfig(
        model=model, train=train_cfg, suite_seed=int(base["suite_seed"]),
        out_dir=str(base["out_dir"]), mode=str(base["mode"]),
    )


def run(config: ExperimentConfig):
    """Execute one training run; returns the run directory."""
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    status_path = os.path.join(out, "status")
    with open(status_path, "w") as fp:
        fp.write("running\n")
    try:
        with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fp:
            json.dump(config.to_dict(), fp, indent=2, sort_keys=True)

        suite = build_suite(config.suite_seed)
        model_rng = np.random.default_rng(np.random.SeedSequence([config.train.seed, 0]))
        model = Seq2SeqModel(config.model, model_rng)
        full_ft = MODES[config.mode][2]
        result = train(model, suite, config.train, out_dir=out, full_finetune=full_ft)

        with open(os.path.join(out, "best.ckpt"), "wb") as fp:
            fp.write(result.best_state)
        model.load_state_dict(checkpoint_from_bytes(result.best_state))
        test = evaluate(model, suite, "test")
        ood = evaluate(
            model, suite, "ood",
            use_mean_task_embedding=("task" in (config.model.enc_mode.value, config.model.dec_mode.value)),
        )
        summary = {
            "mode": config.mode,
            "best_step": result.best_step,
            "best_dev_metric": result.best_metric,
            "test": test,
            "test_mean": float(np.mean(list(test.values()))),
            "ood": ood,
            "ood_mean": float(np.mean(list(ood.values()))),
        }
        with open(os.path.join(out, "test_summary.json"), "w", encoding="utf-8") as fp:
            json.dump(summary, fp, indent=2, sort_keys=True)
        with open(status_path, "w") as fp:
            fp.write("ok\n")
        return out
    except BaseException:
        with open(status_path, "w") as fp:
            fp.write("failed\n")
        raise


def sorted_state(blob):
    from .checkpoint import checkpoint_from_bytes

    return checkpoint_from_bytes(blob)


def _matrix_one(args):
    base_dict, mode, seed_offset = args
    cfg = load_config_from_dict(base_dict)
    out = os.path.join(cfg.out_dir, mode)
    new_train = dataclasses.replace(cfg.train, seed=cfg.train.seed + seed_offset)
    mode_cfg = load_config_from_dict(
        {**base_dict, "mode": mode, "out_dir": out, "train": dataclasses.asdict(new_train)}
    )
    run(mode_cfg)
    return mode, out


def load_config_from_dict(data):
    tmp = dict(data)
    model = dict(tmp.get("model", {}))
    enc, dec, _, use_mlp, post_ln = MODES[tmp["mode"]]
    model["enc_mode"], model["dec_mode"] = enc, dec
    model["use_mlp"], model["adapter_input_post_layernorm"] = use_mlp, post_ln
    return ExperimentConfig(
        model=_build_section(ModelConfig, model, "model"),
        train=_build_section(TrainConfig, dict(tmp.get("train", {})), "train"),
        suite_seed=int(tmp.get("suite_seed", 0)),
        out_dir=str(tmp.get("out_dir", "runs/run")),
        mode=str(tmp["mode"]),
    )


def run_matrix(config: ExperimentConfig, parallel=1):
    """All adaptation-matrix modes off one base config; each mode runs in
    its own subdirectory with a derived seed. Emits a comparison table."""
    base_dict = config.to_dict()
    jobs = [(base_dict, mode, i) for i, mode in enumerate(MATRIX_MODES)]
    results = {}
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for mode, out in pool.map(_matrix_one, jobs):
                results[mode] = out
    else:
        for job in jobs:
            try:
                mode, out = _matrix_one(job)
            except Exception as exc:
                raise RuntimeError(f"matrix run failed in mode {job[1]!r}: {exc}") from exc
            results[mode] = out

    rows = []
    for mode in MATRIX_MODES:
        with open(os.path.join(results[mode], "test_summary.json"), encoding="utf-8") as fp:
            summary = json.load(fp)
        frac = trainable_fraction_for_mode(config, mode)
        rows.append((mode, summary["test_mean"], frac))
    table = accounting.format_table(rows, ["mode", "test_mean", "trainable_pct"])
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "comparison.txt"), "w", encoding="utf-8") as fp:
        fp.write(table + "\n")
    with open(os.path.join(config.out_dir, "comparison.csv"), "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp)
        w.writerow(["mode", "test_mean", "trainable_pct"])
        for row in rows:
            w.writerow(row)
    return results, rows, table


def trainable_fraction_for_mode(config: ExperimentConfig, mode):
    """Census-exact trainable fraction for a mode under the base config."""
    enc, dec, full_ft, use_mlp, post_ln = MODES[mode]
    mcfg = dataclasses.replace(
        config.model, enc_mode=enc, dec_mode=dec, use_mlp=use_mlp,
        adapter_input_post_layernorm=post_ln,
    )
    model = Seq2SeqModel(mcfg, np.random.default_rng(0))
    base_count = accounting.census_count(model.base_params())
    if full_ft:
        trainable = base_count + accounting.census_count(model.adaptation_params())
    else:
        trainable = accounting.census_count(model.adaptation_params())
    return accounting.trainable_fraction(trainable, base_count)


def account_table(config: ExperimentConfig):
    """Closed-form counts across modes for the configured dimensions."""
    m = config.model
    model = Seq2SeqModel(m, np.random.default_rng(0))
    base_count = accounting.census_count(model.base_params())
    rows = []
    for mode in MATRIX_MODES:
        enc, dec, full_ft, _, _ = MODES[mode]
        if full_ft:
            count = base_count
        else:
            enc_in = accounting.CountInputs(
                l=m.n_enc_layers, d=m.d_model, a=m.enc_adapter_dim, t=m.n_tasks,
                b=m.hypernet_bottleneck, e_t=m.task_embed_dim, e_l=m.layer_embed_dim,
            )
            dec_in = dataclasses.replace(enc_in, l=m.n_dec_layers, a=m.dec_adapter_dim)
            count = accounting.mode_trainable_count(
                enc, dec, m.n_enc_layers, m.n_dec_layers, enc_in, dec_in
            )
        rows.append((mode, count, accounting.trainable_fraction(count, base_count)))
    return rows, base_count


def _write_account(config, rows, base_count):
    table = accounting.format_table(rows, ["mode", "trainable_params", "pct_of_base"])
    print(f"base parameters: {base_count}")
    print(table)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "accounting.csv"), "w", newline="", encoding="utf-8") as fp:
            w = csv.writer(fp)
            w.writerow(["mode", "trainable_params", "pct_of_base"])
            for row in rows:
                w.writerow(row)


def _export_embeddings_cmd(config):
    run_dir = config.out_dir
    ckpt = os.path.join(run_dir, "best.ckpt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"--export-embeddings needs a finished run at {run_dir} (no best.ckpt)")
    suite = build_suite(config.suite_seed)
    model = Seq2SeqModel(config.model, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(ckpt))
    for split in ("train", "dev"):
        records = export_embeddings(model, suite, split)
        out_csv = os.path.join(run_dir, f"embeddings_{split}.csv")
        write_embedding_csv(out_csv, records)
        coords, ratios = pca_project(records, k=2)
        write_projection_csv(os.path.join(run_dir, f"embeddings_{split}_pca.csv"), records, coords)
        print(f"{split}: {len(records)} records -> {out_csv} (pc ratios {ratios.round(4).tolist()})")


def _probe_cmd(config):
    run_dir = config.out_dir
    ckpt = os.path.join(run_dir, "best.ckpt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"--probe needs a finished run at {run_dir} (no best.ckpt)")
    suite = build_suite(config.suite_seed)
    model = Seq2SeqModel(config.model, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(ckpt))
    cls = [t.name for t in suite.tasks if t.kind == "classification"]
    probe = encoder_probe(model, suite, task_names=cls, cfg=ProbeConfig(seed=config.train.seed))
    full = evaluate(model, suite, "dev", task_names=cls)
    out = {"probe": probe, "full_model": full}
    with open(os.path.join(run_dir, "probe.json"), "w", encoding="utf-8") as fp:
        json.dump(out, fp, indent=2, sort_keys=True)
    print(json.dumps(out, indent=2, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(
        prog="hyperadapters",
        description="Train and analyse adapter/hypernetwork adaptation modes on the synthetic suite.",
    )
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--mode", metavar="NAME", help=f"adaptation mode ({', '.join(MODES)})")
    p.add_argument("--seed", type=int, metavar="N", help="training seed override")
    p.add_argument("--steps", type=int, metavar="N", help="total training steps override")
    p.add_argument("--out", metavar="DIR", help="output / run directory")
    p.add_argument("--matrix", action="store_true", help="run every adaptation mode and emit a comparison table")
    p.add_argument("--account", action="store_true", help="print the parameter-count table for the configured dims")
    p.add_argument("--export-embeddings", action="store_true", help="dump conditioning embeddings + PCA for a finished run")
    p.add_argument("--probe", action="store_true", help="train frozen-encoder probes for a finished run")
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="parallel workers for --matrix")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config,
            overrides={"mode": args.mode, "seed": args.seed, "steps": args.steps, "out": args.out},
        )
        if args.account:
            rows, base_count = account_table(config)
            _write_account(config, rows, base_count)
        elif args.matrix:
            _, rows, table = run_matrix(config, parallel=max(args.parallel, 1))
            print(table)
        elif args.export_embeddings:
            _export_embeddings_cmd(config)
        elif args.probe:
            _probe_cmd(config)
        else:
            out = run(config)
            print(f"run complete: {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ShapeError, AssertionError, KeyError) as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
