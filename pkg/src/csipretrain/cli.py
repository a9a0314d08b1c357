"""Command-line driver: generate datasets, train, evaluate and run the studies.

Every command works inside one run directory::

    manifest.json            resolved config, format versions, parameter block order
    meta.json                timestamps and host info (the only non-deterministic file)
    data/<name>.bin          sample files, each with <name>.manifest.json
    plans/epoch_XXXX.json    batch plans used by `train`
    logs/train_log.csv       one row per optimizer step
    logs/diversity.csv       one row per plan
    checkpoints/model.ckpt
    results/*.csv, *.json    evaluation and study tables
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .datagen import file_sha256, generate_dataset, manifest_path, preset_version, write_dataset
from .metrics import compute_cost, conflict_experiment, format_db
from .model import NumericAbort, TrainState, init_params, load_checkpoint, param_shapes, save_checkpoint
from .pipeline import Corpus, MaskPolicy, batch_gradient_fn, evaluate, model_config, run_training
from .rng import PRNG_NAME
from .scheduler import STRATEGIES, build_homogeneous_plan, build_plan
from .tensor_core import FORMAT_VERSION, SampleFormatError, load_dataset, write_samples

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RESULTS_VERSION = 1
STUDIES = ("strategy-compare", "conflict", "bucket-sweep")

log = logging.getLogger("csipretrain")


class DataError(RuntimeError):
    """Missing, corrupted or mismatching dataset or checkpoint files."""


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def sub(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def data(self) -> Path:
        return self.sub("data")

    @property
    def plans(self) -> Path:
        return self.sub("plans")

    @property
    def logs(self) -> Path:
        return self.sub("logs")

    @property
    def results(self) -> Path:
        return self.sub("results")

    @property
    def checkpoint(self) -> Path:
        return self.sub("checkpoints") / "model.ckpt"

    def dataset_path(self, name: str) -> Path:
        return self.data / f"{name}.bin"


# -- file helpers ------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format_db(v) if v == -math.inf else repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "-inf" if x < 0 else "inf"
        return x
    return x


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: ExperimentConfig, run: RunDir) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    write_json(run.root / "manifest.json", {
        "results_version": RESULTS_VERSION,
        "package_version": __version__,
        "sample_format_version": FORMAT_VERSION,
        "preset_version": preset_version(),
        "prng": PRNG_NAME,
        "config": cfg.to_dict(),
        "gradient_block_order": [[n, list(s)] for n, s in param_shapes(model_config(cfg))],
    })


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Meta:
    """Records start/finish times of a command in meta.json."""

    def __init__(self, run: RunDir, command: str, argv: Sequence[str]):
        self.path = run.root / "meta.json"
        self.command = command
        self.argv = list(argv)

    def _update(self, **fields):
        meta = {}
        if self.path.exists():
            try:
                meta = json.loads(self.path.read_text())
            except ValueError:
                meta = {}
        meta.setdefault("commands", {}).setdefault(self.command, {}).update(fields)
        meta["python"] = platform.python_version()
        meta["numpy"] = np.__version__
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def __enter__(self):
        self._update(started=_now(), argv=self.argv, finished=None, status="running")
        return self

    def __exit__(self, exc_type, exc, tb):
        self._update(finished=_now(), status="ok" if exc is None else f"failed: {exc}")
        return False


# -- datasets ------------------------------------------------------------------------------


def _all_specs(cfg: ExperimentConfig):
    return cfg.dataset_specs() + cfg.dataset_specs(zero_shot=True)


def cmd_generate(cfg: ExperimentConfig, run: RunDir) -> list[dict]:
    """Write every configured dataset; existing files must hash identically."""
    manifests = []
    for spec in _all_specs(cfg):
        path = run.dataset_path(spec.name)
        samples = generate_dataset(spec)
        buf = io.BytesIO()
        write_samples(buf, samples)
        digest = hashlib.sha256(buf.getvalue()).hexdigest()
        if path.exists():
            found = file_sha256(path)
            if found != digest:
                raise DataError(f"{path} exists with sha256 {found[:12]}..., config produces {digest[:12]}...; "
                                "remove it or use another output directory")
            log.info("dataset %s unchanged (%s...)", spec.name, digest[:12])
        manifests.append(write_dataset(spec, path, samples))
        log.info("wrote %s: %d samples", path, spec.n_samples)
    write_json(run.results / "datasets.json",
               {m["spec"]["name"]: {"sha256": m["sha256"], "n_samples": m["n_samples"]} for m in manifests})
    return manifests


def _load_verified(spec, run: RunDir):
    path = run.dataset_path(spec.name)
    mpath = manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise DataError(f"dataset {spec.name} not found under {run.data}; run 'generate' first")
    manifest = json.loads(mpath.read_text())
    found = file_sha256(path)
    if found != manifest.get("sha256"):
        raise DataError(f"{path}: sha256 {found[:12]}... does not match its manifest; the file was modified")
    if manifest.get("spec") != json.loads(json.dumps(spec.to_dict())):
        raise DataError(f"{path} was generated from a different dataset config; regenerate it")
    try:
        return load_dataset(path)
    except SampleFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_corpus(cfg: ExperimentConfig, run: RunDir, zero_shot: bool = False) -> Corpus:
    specs = cfg.dataset_specs(zero_shot=zero_shot)
    datasets = {spec.dataset_id: _load_verified(spec, run) for spec in specs}
    return Corpus(datasets, cfg.patch_spec, cfg.train.snr_db, noise_seed=cfg.seed)


# -- train -----------------------------------------------------------------------------------

TRAIN_LOG_COLUMNS = ("step", "epoch", "batch", "mask", "batch_size", "h", "padding_ratio", "loss")
DIVERSITY_COLUMNS = ("epoch", "batches", "mean_entropy", "epsilon", "violations")


def _progress(every: int):
    def report(row):
        if row["step"] % every == 0:
            log.info("step %d loss %.5f h=%d", row["step"], row["loss"], row["h"])
    return report


def cmd_train(cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = load_corpus(cfg, run)
    mcfg = model_config(cfg)
    result = run_training(cfg, corpus, on_step=_progress(max(1, cfg.train.steps // 20)))
    for old in run.plans.glob("epoch_*.json"):
        old.unlink()
    for i, plan in enumerate(result.plans):
        (run.plans / f"epoch_{i:04d}.json").write_text(plan.dumps() + "\n")
    write_csv(run.logs / "train_log.csv", result.log, TRAIN_LOG_COLUMNS)
    write_csv(run.logs / "diversity.csv", result.diversity, DIVERSITY_COLUMNS)
    save_checkpoint(run.checkpoint, mcfg, result.state.params, result.state.step)
    slots = sum(r["batch_size"] * r["h"] for r in result.log)
    valid = sum(r["batch_size"] * r["h"] * (1.0 - r["padding_ratio"]) for r in result.log)
    summary = {
        "strategy": cfg.schedule.strategy,
        "buckets": cfg.schedule.buckets,
        "steps": result.state.step,
        "plans": len(result.plans),
        "token_slots": slots,
        "padding_ratio": (1.0 - valid / slots) if slots else 0.0,
        "final_loss": result.log[-1]["loss"] if result.log else None,
    }
    write_json(run.results / "train_summary.json", summary)
    return summary


# -- eval --------------------------------------------------------------------------------------

EVAL_COLUMNS = ("group", "dataset", "name", "split", "task", "region", "n", "nmse", "nmse_db")


def _tag(rows, group, names):
    for r in rows:
        r["group"] = group
        r["name"] = names[r["dataset"]]
    return rows


def _summarize(rows, region="predicted"):
    out = {}
    for r in rows:
        if r["region"] != region or r["n"] == 0:
            continue
        out.setdefault(f'{r["group"]}/{r["split"]}/{r["task"]}', []).append(r["nmse_db"])
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def evaluate_params(cfg: ExperimentConfig, run: RunDir, params: dict, corpus: Corpus | None = None) -> list[dict]:
    mcfg = model_config(cfg)
    policy = MaskPolicy(cfg.masking, cfg.patch_spec)
    corpus = corpus or load_corpus(cfg, run)
    names = {s.dataset_id: s.name for s in _all_specs(cfg)}
    rows = []
    for split in cfg.eval.splits:
        rows += _tag(evaluate(params, mcfg, corpus, sorted(corpus.datasets), split, cfg.eval.tasks, policy,
                              cfg.seed, cfg.eval.max_samples), "in-distribution", names)
    if cfg.eval_datasets:
        zs = load_corpus(cfg, run, zero_shot=True)
        for split in cfg.eval.splits:
            rows += _tag(evaluate(params, mcfg, zs, sorted(zs.datasets), split, cfg.eval.tasks, policy,
                                  cfg.seed, cfg.eval.max_samples), "zero-shot", names)
    return rows


def cmd_eval(cfg: ExperimentConfig, run: RunDir, checkpoint: str | Path | None = None,
             untrained: bool = False) -> dict:
    mcfg = model_config(cfg)
    if untrained:
        params, step, tag = init_params(mcfg, cfg.seed), 0, "eval_untrained"
    else:
        path = Path(checkpoint) if checkpoint else run.checkpoint
        if not path.exists():
            raise DataError(f"checkpoint {path} not found; run 'train' first")
        try:
            ck_cfg, params, step = load_checkpoint(path)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: {exc}") from None
        if ck_cfg != mcfg:
            raise ConfigError(f"checkpoint model config {ck_cfg} differs from the config's {mcfg}")
        tag = "eval"
    rows = evaluate_params(cfg, run, params)
    write_csv(run.results / f"{tag}.csv", rows, EVAL_COLUMNS)
    summary = {"checkpoint_step": step, "mean_nmse_db": _summarize(rows),
               "mean_full_nmse_db": _summarize(rows, "full")}
    write_json(run.results / f"{tag}_summary.json", summary)
    return summary


# -- studies -----------------------------------------------------------------------------------


def _study_steps(cfg: ExperimentConfig) -> int:
    return cfg.train.steps if cfg.study.train_steps is None else cfg.study.train_steps


def _final_nmse(cfg: ExperimentConfig, corpus: Corpus, params: dict) -> tuple[float, dict]:
    """Mean over training datasets of the test-split reconstruction NMSE (dB)."""
    mcfg = model_config(cfg)
    policy = MaskPolicy(cfg.masking, cfg.patch_spec)
    rows = evaluate(params, mcfg, corpus, sorted(corpus.datasets), "test", ("reconstruction",), policy,
                    cfg.seed, cfg.eval.max_samples)
    per = {r["dataset"]: r["nmse_db"] for r in rows if r["region"] == "predicted"}
    return float(np.mean(list(per.values()))), per


def _plan_row(pool, plan) -> dict:
    c = compute_cost(plan, pool.lengths)
    return {"jpad": c.jpad, "padding_ratio": c.padding_ratio, "cost": c.cost, "valid_tokens": c.valid_tokens,
            "batches": len(plan)}


def study_strategy_compare(cfg: ExperimentConfig, run: RunDir, corpus: Corpus) -> dict:
    pool = corpus.pool("train")
    steps = _study_steps(cfg)
    rows, per_ds = [], []
    for strategy in cfg.study.strategies:
        buckets = cfg.schedule.buckets if strategy == "proposed" else None
        plan = build_plan(pool, strategy, cfg.schedule.batch_size, cfg.seed, buckets)
        row = {"strategy": strategy, "buckets": buckets, **_plan_row(pool, plan), "train_steps": steps}
        log.info("strategy %s: padding ratio %.4f, training %d steps", strategy, row["padding_ratio"], steps)
        result = run_training(cfg, corpus, strategy=strategy, steps=steps)
        row["final_loss"] = result.log[-1]["loss"] if result.log else None
        row["nmse_db"], per = _final_nmse(cfg, corpus, result.state.params)
        per_ds += [{"strategy": strategy, "dataset": d, "nmse_db": v} for d, v in per.items()]
        rows.append(row)
    cols = ("strategy", "buckets", "jpad", "padding_ratio", "cost", "valid_tokens", "batches", "train_steps",
            "final_loss", "nmse_db")
    write_csv(run.results / "strategy_compare.csv", rows, cols)
    write_csv(run.results / "strategy_compare_nmse.csv", per_ds, ("strategy", "dataset", "nmse_db"))
    summary = {"rows": rows}
    write_json(run.results / "strategy_compare.json", summary)
    return summary


def study_bucket_sweep(cfg: ExperimentConfig, run: RunDir, corpus: Corpus) -> dict:
    pool = corpus.pool("train")
    steps = _study_steps(cfg)
    rows = []
    for B in cfg.study.bucket_values:
        if B > len(pool):
            raise ConfigError(f"bucket count {B} exceeds the {len(pool)} training samples")
        plan = build_plan(pool, "proposed", cfg.schedule.batch_size, cfg.seed, B)
        row = {"buckets": B, **_plan_row(pool, plan), "train_steps": steps}
        log.info("B=%d: padding ratio %.4f, training %d steps", B, row["padding_ratio"], steps)
        result = run_training(cfg, corpus, strategy="proposed", steps=steps, buckets=B)
        row["nmse_db"], _ = _final_nmse(cfg, corpus, result.state.params)
        rows.append(row)
    cols = ("buckets", "jpad", "padding_ratio", "cost", "valid_tokens", "batches", "train_steps", "nmse_db")
    write_csv(run.results / "bucket_sweep.csv", rows, cols)
    summary = {"rows": rows}
    write_json(run.results / "bucket_sweep.json", summary)
    return summary


def conflict_runs(cfg: ExperimentConfig, corpus: Corpus, params: dict) -> list[dict]:
    """Mixed versus length-homogeneous conflict statistics for every configured seed."""
    st = cfg.study
    pool = corpus.pool("train")
    mcfg = model_config(cfg)
    policy = MaskPolicy(cfg.masking, cfg.patch_spec)
    bs = st.conflict_batch_size or cfg.schedule.batch_size
    out = []
    for seed in st.conflict_seeds:
        mixed = build_plan(pool, st.conflict_mixed, bs, seed, cfg.schedule.buckets)
        aligned = build_homogeneous_plan(pool, bs, seed)
        grad = batch_gradient_fn(params, mcfg, corpus, policy, seed, st.conflict_mask_kind)
        a, b = conflict_experiment(mixed, aligned, grad, st.conflict_pairs, seed, st.conflict_pairing)
        out.append({"seed": seed, "mixed": a, "homogeneous": b})
        log.info("seed %d: negative fraction mixed %.4f vs homogeneous %.4f",
                 seed, a.fraction_negative, b.fraction_negative)
    return out


def study_conflict(cfg: ExperimentConfig, run: RunDir, corpus: Corpus) -> dict:
    st = cfg.study
    log.info("training snapshot for %d steps", st.conflict_snapshot_steps)
    snap = run_training(cfg, corpus, steps=st.conflict_snapshot_steps)
    results = conflict_runs(cfg, corpus, snap.state.params)
    rows, hist = [], []
    for r in results:
        for plan_name in ("mixed", "homogeneous"):
            s = r[plan_name]
            rows.append({"seed": r["seed"], "plan": plan_name, "pairs": len(s.cosines),
                         "fraction_negative": s.fraction_negative, "mean_cosine": s.mean})
            for lo, hi, count in zip(s.bin_edges[:-1], s.bin_edges[1:], s.histogram):
                hist.append({"seed": r["seed"], "plan": plan_name, "bin_lo": lo, "bin_hi": hi, "count": int(count)})
    write_csv(run.results / "conflict.csv", rows, ("seed", "plan", "pairs", "fraction_negative", "mean_cosine"))
    write_csv(run.results / "conflict_hist.csv", hist, ("seed", "plan", "bin_lo", "bin_hi", "count"))
    summary = {
        "snapshot_steps": st.conflict_snapshot_steps,
        "mixed_strategy": st.conflict_mixed,
        "pairing": st.conflict_pairing,
        "mask_kind": st.conflict_mask_kind,
        "batch_size": st.conflict_batch_size or cfg.schedule.batch_size,
        "rows": rows,
        "mixed_exceeds_homogeneous_all_seeds": all(
            r["mixed"].fraction_negative > r["homogeneous"].fraction_negative for r in results),
    }
    write_json(run.results / "conflict.json", summary)
    return summary


def cmd_study(name: str, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = load_corpus(cfg, run)
    if name == "strategy-compare":
        return study_strategy_compare(cfg, run, corpus)
    if name == "bucket-sweep":
        return study_bucket_sweep(cfg, run, corpus)
    if name == "conflict":
        return study_conflict(cfg, run, corpus)
    raise ConfigError(f"unknown study {name!r}; expected one of {STUDIES}")


# -- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    common.add_argument("--strategy", choices=STRATEGIES, help="batching strategy (overrides config)")
    common.add_argument("--buckets", type=int, help="bucket count B (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="csipretrain", description="Multi-scale CSI pretraining experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize the configured datasets")
    sub.add_parser("train", parents=[common], help="pretrain the toy model")
    ev = sub.add_parser("eval", parents=[common], help="NMSE tables for a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint file (default: <run>/checkpoints/model.ckpt)")
    ev.add_argument("--untrained", action="store_true", help="evaluate the seeded initialization instead")
    sd = sub.add_parser("study", parents=[common], help="strategy comparison, conflict or bucket sweep")
    sd.add_argument("name", choices=STUDIES)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, seed=args.seed, strategy=args.strategy, buckets=args.buckets,
                             output_dir=args.out)
        run = RunDir(cfg.output_dir)
        write_manifest(cfg, run)
        with _Meta(run, args.command if args.command != "study" else f"study {args.name}", argv):
            if args.command == "generate":
                out = cmd_generate(cfg, run)
                print(f"wrote {len(out)} datasets to {run.data}")
            elif args.command == "train":
                out = cmd_train(cfg, run)
                print(f"trained {out['steps']} steps, final loss {out['final_loss']}")
            elif args.command == "eval":
                out = cmd_eval(cfg, run, args.checkpoint, args.untrained)
                for key, db in out["mean_nmse_db"].items():
                    print(f"{key}: {format_db(db)} dB")
            else:
                cmd_study(args.name, cfg, run)
                print(f"wrote study tables to {run.results}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SampleFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
