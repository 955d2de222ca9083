"""``mplite`` command line: synth, ingest, pretrain, train, eval, report.

Stages talk only through files under the configured output directory::

    data/      admissions.csv diagnoses.csv labevents.csv ground_truth.json manifest.json
    ingest/    manifest.json vocab.json split.json
    pretrain/  lab_module.json history.json
    train/     {task}_{mode}_seed{s}.json  {task}_{mode}_seed{s}.history.json
    eval/      {task}_{mode}.json  {task}_{mode}.txt
    report/    report.json  report.txt

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__, checkpoint
from .config import MODES, TASKS, ExperimentConfig, load_config
from .ehr import DatasetSplit, Vocabulary, validate_vocab_size
from .errors import MPLiteError, ValidationError
from .fusion import evaluate, init_fused, load_experiment, save_experiment, train_downstream
from .metrics import (DG_METRICS, HF_METRICS, METRIC_LABELS, MetricsReport, aggregate_runs, format_cell,
                      format_table, report_table)
from .nn import make_rng
from .pipeline import Dataset, build_dataset, pretrain_samples, task_samples
from .pretrain import load_module, save_module, train_pretrain
from .synth import write_synthetic

log = logging.getLogger("mplite")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
BACKBONE_NAME = "GRU"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the data/pretrain seed, or run a single seed for train/eval")
    common.add_argument("--out", help="override out_dir")
    common.add_argument("--task", choices=TASKS, help="restrict to one task")
    common.add_argument("--mode", choices=MODES, help="restrict to baseline or mplite")
    p = _Parser(prog="mplite", description="Lab-result pretraining fused into a GRU diagnosis predictor.")
    p.add_argument("--version", action="version", version=f"mplite {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("synth", "write a synthetic dataset"), ("ingest", "build vocabularies, cohorts and split"),
                       ("pretrain", "train and freeze the lab module"), ("train", "train downstream models"),
                       ("eval", "evaluate trained models on the test split"),
                       ("report", "paired baseline vs +MPLite table")):
        sub.add_parser(name, parents=[common], help=text)
    return p


def _config(args) -> ExperimentConfig:
    overrides = {"out_dir": args.out}
    if args.seed is not None:
        if args.command in ("train", "eval"):
            overrides.update(seeds=[args.seed], n_runs=1)
        else:
            overrides["seed"] = args.seed
    if args.task is not None:
        overrides["tasks"] = [args.task]
    return load_config(args.config, overrides)


def _modes(args) -> list[str]:
    return [args.mode] if args.mode else list(MODES)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write_text(path, checkpoint.dump_json(obj))


def _read_json(path: Path, producer: str):
    if not path.is_file():
        raise ValidationError(f"{path} not found; run `mplite {producer}` first")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: corrupt JSON ({exc})") from None


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> dict:
    if cfg.synth is None:
        raise ValidationError("config has no synth section")
    out = cfg.data_dir
    manifest = write_synthetic(out, cfg.synth, cfg.seed)
    _write_json(out / "manifest.json", manifest)
    log.info("synthetic dataset (%d patients) written to %s", manifest["patients_total"], out)
    return manifest


def _check_data_dir(cfg: ExperimentConfig) -> None:
    if not cfg.data_dir.is_dir():
        hint = "; run `mplite synth` first" if cfg.data.dir is None else ""
        raise ValidationError(f"data directory {cfg.data_dir} not found{hint}")


def cmd_ingest(cfg: ExperimentConfig) -> dict:
    _check_data_dir(cfg)
    ds = build_dataset(cfg.data_dir, cfg.data.split_ratios, cfg.data.split_seed)
    validate_vocab_size(ds.diag_vocab, cfg.data.expected_n_diag)
    validate_vocab_size(ds.lab_vocab, cfg.data.expected_n_lab)
    # touch every sample once so unknown-code counters and policy errors surface here
    for task in cfg.tasks:
        for part in ("train", "val", "test"):
            task_samples(ds, task, part, cfg.data.unknown_code_policy)
    manifest = ds.manifest()
    out = cfg.stage_dir("ingest")
    _write_json(out / "vocab.json", {"diagnosis": ds.diag_vocab.to_dict(), "lab": ds.lab_vocab.to_dict()})
    _write_json(out / "split.json", ds.split.to_dict())
    _write_json(out / "manifest.json", manifest)
    log.info("ingested %d patients (%d in prediction cohort)", manifest["patients_total"],
             manifest["patients_multi_utilized"])
    return manifest


def _dataset(cfg: ExperimentConfig) -> Dataset:
    """Rebuild the dataset with the vocabularies and split recorded by ingest."""
    _check_data_dir(cfg)
    ing = cfg.stage_dir("ingest")
    vocab = _read_json(ing / "vocab.json", "ingest")
    split = DatasetSplit.from_dict(_read_json(ing / "split.json", "ingest"))
    return build_dataset(cfg.data_dir, cfg.data.split_ratios, cfg.data.split_seed,
                         Vocabulary.from_dict(vocab["diagnosis"]), Vocabulary.from_dict(vocab["lab"]), split)


def _lab_path(cfg: ExperimentConfig) -> Path:
    return cfg.stage_dir("pretrain") / "lab_module.json"


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    ds = _dataset(cfg)
    samples = pretrain_samples(ds, cfg.data.unknown_code_policy)
    hyper = cfg.pretrain_hyper()
    module = train_pretrain(samples, hyper, make_rng(hyper.seed), ds.lab_vocab, ds.diag_vocab)
    path = _lab_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_module(module, path)
    _write_json(path.parent / "history.json", module.meta["history"])
    log.info("lab module trained on %d samples (%d epochs, best %d) -> %s", len(samples),
             module.meta["epochs_run"], module.meta["best_epoch"], path)
    return path


def _load_lab(cfg: ExperimentConfig, ds: Dataset):
    path = _lab_path(cfg)
    if not path.is_file():
        raise ValidationError(f"MPLite mode needs the pretrained lab module at {path}; "
                              f"run `mplite pretrain --config ...` first or use --mode baseline")
    return load_module(path, ds.lab_vocab, ds.diag_vocab), path


def _ckpt_path(cfg: ExperimentConfig, task: str, mode: str, seed: int) -> Path:
    return cfg.stage_dir("train") / f"{task}_{mode}_seed{seed}.json"


def _fan_out(cfg: ExperimentConfig, fn, items):
    if cfg.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_train(cfg: ExperimentConfig, modes: Sequence[str]) -> list[Path]:
    ds = _dataset(cfg)
    lab = lab_path = lab_sha = None
    if "mplite" in modes:
        lab, lab_path = _load_lab(cfg, ds)
        lab_sha = checkpoint.file_sha256(lab_path)
    policy = cfg.data.unknown_code_policy
    written = []
    for task in cfg.tasks:
        train = task_samples(ds, task, "train", policy, sliding=cfg.data.sliding_window)
        val = task_samples(ds, task, "val", policy)
        for mode in modes:
            def run(seed, task=task, mode=mode, train=train, val=val):
                hyper = cfg.downstream_hyper(seed, ds.diag_vocab.size, ds.lab_vocab.size)
                model = init_fused(task, ds.diag_vocab.size, make_rng(seed, 0),
                                   lab if mode == "mplite" else None, hyper)
                model, history = train_downstream(model, train, val, hyper, make_rng(seed, 1))
                best = max((h["epoch"] for h in history if h.get("best")), default=len(history) - 1)
                meta = {"seed": seed, "hyper": hyper.__dict__, "best_epoch": best,
                        "diag_fingerprint": ds.diag_vocab.fingerprint(),
                        "lab_fingerprint": ds.lab_vocab.fingerprint(),
                        "lab_module_sha256": lab_sha if mode == "mplite" else None,
                        "n_train": len(train), "n_val": len(val)}
                path = _ckpt_path(cfg, task, mode, seed)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_experiment(model, path, meta)
                _write_json(path.with_suffix(".history.json"), history)
                log.info("trained %s/%s seed %d (best epoch %d) -> %s", task, mode, seed, best, path)
                return path

            written += _fan_out(cfg, run, list(cfg.seeds))
    return written


def cmd_eval(cfg: ExperimentConfig, modes: Sequence[str]) -> list[Path]:
    ds = _dataset(cfg)
    lab = lab_path = None
    if "mplite" in modes:
        lab, lab_path = _load_lab(cfg, ds)
    policy = cfg.data.unknown_code_policy
    out = cfg.stage_dir("eval")
    written = []
    for task in cfg.tasks:
        test = task_samples(ds, task, "test", policy)
        for mode in modes:
            def run(seed, task=task, mode=mode):
                path = _ckpt_path(cfg, task, mode, seed)
                if not path.is_file():
                    raise ValidationError(f"{path} not found; run `mplite train --mode {mode}` first")
                model, meta = load_experiment(path, lab if mode == "mplite" else None, lab_path, ds.diag_vocab)
                if meta["task"] != task or meta["mode"] != mode:
                    raise ValidationError(f"{path} holds a {meta['task']}/{meta['mode']} model")
                return evaluate(model, test, float(meta["hyper"]["threshold"]))

            runs = _fan_out(cfg, run, list(cfg.seeds))
            report = aggregate_runs(runs, list(cfg.seeds))
            doc = report.to_dict()
            doc.update(task=task, mode=mode, n_test=len(test))
            name = _row_name(mode)
            _write_json(out / f"{task}_{mode}.json", doc)
            checkpoint.atomic_write_text(out / f"{task}_{mode}.txt", f"{task.upper()} prediction\n"
                                         + report_table(report, name))
            log.info("%s/%s: %s", task, mode, {k: round(v, 4) for k, v in report.mean.items()})
            written.append(out / f"{task}_{mode}.json")
    return written


def _row_name(mode: str) -> str:
    return BACKBONE_NAME if mode == "baseline" else f"{BACKBONE_NAME}+MPLite"


def paired_rows(base: MetricsReport, lite: MetricsReport, keys: Sequence[str]) -> tuple[list[list[str]], dict]:
    """Table rows (baseline, +MPLite, delta) and the deltas as numbers."""
    delta = {k: lite.mean[k] - base.mean[k] for k in keys}
    rows = [[_row_name("baseline")] + [format_cell(base.mean[k], base.std[k]) for k in keys],
            [_row_name("mplite")] + [format_cell(lite.mean[k], lite.std[k]) for k in keys],
            ["Delta"] + [f"{100 * delta[k]:+.2f}" for k in keys]]
    return rows, delta


def cmd_report(cfg: ExperimentConfig) -> str:
    ev = cfg.stage_dir("eval")
    sections, doc = [], {"tasks": {}}
    for task in cfg.tasks:
        reports = {}
        for mode in MODES:
            d = _read_json(ev / f"{task}_{mode}.json", f"eval --task {task} --mode {mode}")
            reports[mode] = MetricsReport.from_dict(d)
        keys = DG_METRICS if task == "dg" else HF_METRICS
        rows, delta = paired_rows(reports["baseline"], reports["mplite"], keys)
        n = reports["baseline"].n_runs
        title = f"{task.upper()} prediction, mean (std) over {n} run{'s' if n != 1 else ''}, values in %"
        sections.append(title + "\n" + format_table(["Model"] + [METRIC_LABELS[k] for k in keys], rows))
        doc["tasks"][task] = {"baseline": reports["baseline"].to_dict(), "mplite": reports["mplite"].to_dict(),
                              "delta": delta}
    text = "\n".join(sections)
    out = cfg.stage_dir("report")
    _write_json(out / "report.json", doc)
    checkpoint.atomic_write_text(out / "report.txt", text)
    return text


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _setup_logging() -> None:
    name = os.environ.get("MPLITE_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise ValidationError(f"MPLITE_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[name])
    log.propagate = False
    logging.captureWarnings(True)
    wlog = logging.getLogger("py.warnings")
    wlog.handlers[:] = [handler]
    wlog.propagate = False


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    if args.command == "synth":
        print(json.dumps(cmd_synth(cfg), indent=1, sort_keys=True))
    elif args.command == "ingest":
        print(json.dumps(cmd_ingest(cfg), indent=1, sort_keys=True))
    elif args.command == "pretrain":
        print(cmd_pretrain(cfg))
    elif args.command == "train":
        for p in cmd_train(cfg, _modes(args)):
            print(p)
    elif args.command == "eval":
        for p in cmd_eval(cfg, _modes(args)):
            print(p)
    else:
        print(cmd_report(cfg), end="")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _setup_logging()
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MPLiteError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
