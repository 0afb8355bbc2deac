"""Experiment orchestration: leave-one-domain-out runs, ablations, sweeps, results tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .domains import ExperimentSplit, make_split
from .networks import ParameterVector, encode_parameters
from .protocol import RoundMessage, build_models, global_rng, make_clients, run_round, server_init

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
SUMMARY_SCHEMA_VERSION = 1
ABLATION_MODES = ("fedavg", "no_rp", "no_onehot", "fedadg")
ABLATION_LABELS = {
    "fedavg": "FedAvg",
    "no_rp": "FedADG w/o. RP",
    "no_onehot": "FedADG w/o. one-hot",
    "fedadg": "FedADG",
}
FIXED_REFERENCES = ("gaussian", "uniform", "laplace")
RP_SWEEP_HEADER = ["ratio", "target", "seed", "accuracy"]


def split_for(cfg: ExperimentConfig, target_index: int, seed: int) -> ExperimentSplit:
    return make_split(cfg.suite, cfg.domain_params, target_index,
                      samples=cfg.samples_per_domain, noise=cfg.data_noise, seed=seed,
                      num_classes=cfg.num_classes, input_dim=cfg.input_dim)


def target_label(cfg: ExperimentConfig, target_index: int) -> str:
    p = cfg.domain_params[target_index]
    return f"{p:g}"


def metric_columns(cfg: ExperimentConfig) -> list[str]:
    """Fixed column order of metrics.csv for this config."""
    k = cfg.num_sources
    cols = ["config_hash", "mode", "seed", "target", "round"]
    parts = ["l_err"] + (["l_adv_f", "l_adv_d"] if cfg.adversarial else [])
    if cfg.adaptive_reference:
        parts.append("l_adv_g")
    for c in range(k):
        cols += [f"client{c}_{p}" for p in parts]
    cols += [f"client{c}_source_acc" for c in range(k)]
    cols += ["mean_source_acc", "target_acc"]
    if cfg.track_alignment:
        cols.append("mean_pairwise_mmd")
        if cfg.adversarial:
            cols += [f"client{c}_mmd_ref" for c in range(k)]
    return cols


@dataclass
class RunResult:
    target_index: int
    seed: int
    rows: list[dict]
    final_w: ParameterVector
    history: list[dict]

    @property
    def final_target_acc(self) -> float:
        return self.rows[-1]["target_acc"]


def _evaluate(cfg, split, clients, w, t, seed, losses_by_client) -> dict:
    F, C, G = build_models(cfg, None)
    F.unflatten(w.select(["w_f"]))
    C.unflatten(w.select(["w_c"]))
    if G is not None:
        G.unflatten(w.select(["w_g"]))
    row: dict = {"config_hash": cfg.hash(), "mode": cfg.mode, "seed": seed,
                 "target": target_label(cfg, split.target.domain_id), "round": t}
    for c, losses in enumerate(losses_by_client):
        for name in ("l_err", "l_adv_f", "l_adv_d", "l_adv_g"):
            key = f"client{c}_{name}"
            val = losses.get(name, losses.get("l_err_a")) if name == "l_err" else losses.get(name)
            row[key] = val
    accs = []
    for c, src in enumerate(split.sources):
        acc = metrics.accuracy(F, C, *src.subset("test"))
        row[f"client{c}_source_acc"] = acc
        accs.append(acc)
    row["mean_source_acc"] = float(np.mean(accs))
    row["target_acc"] = metrics.accuracy(F, C, *split.target.subset("all"))
    if cfg.track_alignment:
        data = [src.subset("train") for src in split.sources]
        reference = None
        if cfg.adaptive_reference:
            reference = G
        elif cfg.adversarial:
            reference = clients[0].reference
        rep = metrics.alignment_report(F, data, reference, rng=global_rng(seed, 3, t))
        row["mean_pairwise_mmd"] = rep.mean_pairwise
        for c in range(len(data)):
            row[f"client{c}_mmd_ref"] = float(rep.to_reference[c])
    return row


def run_single(cfg: ExperimentConfig, target_index: int, seed: int, *,
               parallel_clients: bool = False,
               observer: Callable[[RoundMessage], None] | None = None,
               step_hook=None) -> RunResult:
    """T rounds of training for one (target, seed) pair, evaluated after every round."""
    split = split_for(cfg, target_index, seed)
    server = server_init(cfg, seed, split.K)
    clients = make_clients(cfg, split.sources, seed)
    if step_hook is not None:
        for c in clients:
            c.step_hook = step_hook
    cols = metric_columns(cfg)
    rows = [_project(_evaluate(cfg, split, clients, server.w, 0, seed, [{}] * split.K), cols)]
    executor = ThreadPoolExecutor(max_workers=split.K) if parallel_clients else None
    try:
        for _ in range(cfg.rounds):
            t = server.round
            server = run_round(server, clients, executor=executor, observer=observer)
            losses = [c.last_losses for c in sorted(clients, key=lambda c: c.client_id)]
            rows.append(_project(_evaluate(cfg, split, clients, server.w, t, seed, losses), cols))
    finally:
        if executor is not None:
            executor.shutdown()
    return RunResult(target_index, seed, rows, server.w, list(server.history))


def _project(row: dict, cols: list[str]) -> dict:
    return {c: row.get(c) for c in cols}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], cols: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def _run_job(args):
    cfg, t, s, parallel_clients = args
    return run_single(cfg, t, s, parallel_clients=parallel_clients)


def run_all(cfg: ExperimentConfig, *, jobs: int = 1, parallel_clients: bool = False) -> list[RunResult]:
    """Every (target, seed) pair, ordered by target then seed."""
    tasks = [(cfg, t, s, parallel_clients) for t in cfg.target_indices for s in cfg.seeds]
    if jobs <= 1:
        return [_run_job(a) for a in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))


def run_dir_for(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.mode}-{cfg.reference}-{cfg.hash()[:12]}"


def write_run(cfg: ExperimentConfig, results: Sequence[RunResult], run_dir: Path | None = None) -> Path:
    """metrics.csv, summary.json, trace.log and final checkpoints for a finished run set."""
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(cfg)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    cols = metric_columns(cfg)
    rows = [r for res in results for r in res.rows]
    (run_dir / "metrics.csv").write_text(rows_to_csv(rows, cols))

    with open(run_dir / "trace.log", "w") as fh:
        for res in results:
            for rec in res.history:
                fh.write(json.dumps({"config_hash": h, "seed": res.seed,
                                     "target": target_label(cfg, res.target_index), **rec},
                                    sort_keys=True) + "\n")

    for res in results:
        name = f"target{res.target_index}_seed{res.seed}.ckpt"
        (run_dir / "checkpoints" / name).write_bytes(encode_parameters(
            res.final_w, seed=res.seed, config_hash=h, target=res.target_index, round=cfg.rounds))

    table = ResultsTable.from_results(cfg, {cfg.mode if cfg.mode != "fixed_ref" else cfg.reference: results})
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "config_hash": h,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "rounds_evaluated": sorted({r["round"] for r in rows}),
        "final": [
            {"target": target_label(cfg, res.target_index), "seed": res.seed,
             "round": res.rows[-1]["round"], "target_acc": res.rows[-1]["target_acc"],
             "mean_source_acc": res.rows[-1]["mean_source_acc"],
             "mean_pairwise_mmd": res.rows[-1].get("mean_pairwise_mmd")}
            for res in results
        ],
        "table": table.to_dict(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1, parallel_clients: bool = False) -> Path:
    results = run_all(cfg, jobs=jobs, parallel_clients=parallel_clients)
    return write_run(cfg, results)


@dataclass
class ResultsTable:
    """Rows are methods, columns are held-out targets plus their average.

    ``cells[row][target]`` lists final target accuracy per seed (seed order
    as configured).
    """
    targets: list[str]
    cells: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    config_hash: str = ""

    @classmethod
    def from_results(cls, cfg: ExperimentConfig, by_row: dict[str, Sequence[RunResult]]) -> ResultsTable:
        targets = [target_label(cfg, t) for t in cfg.target_indices]
        table = cls(targets, config_hash=cfg.hash())
        for row, results in by_row.items():
            cell: dict[str, list[float]] = {t: [] for t in targets}
            for res in sorted(results, key=lambda r: (r.target_index, cfg.seeds.index(r.seed))):
                cell[target_label(cfg, res.target_index)].append(res.final_target_acc)
            table.cells[row] = cell
        return table

    @property
    def rows(self) -> list[str]:
        return list(self.cells)

    def mean(self, row: str, target: str) -> float:
        return float(np.mean(self.cells[row][target]))

    def std(self, row: str, target: str) -> float:
        return float(np.std(self.cells[row][target]))

    def avg(self, row: str) -> float:
        """Average column: mean of the per-target means."""
        return float(np.mean([self.mean(row, t) for t in self.targets]))

    def avg_std(self, row: str) -> float:
        """Std over seeds of the per-seed target average."""
        per_seed = np.mean([self.cells[row][t] for t in self.targets], axis=0)
        return float(np.std(per_seed))

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "targets": self.targets,
            "rows": {
                row: {"cells": {t: {"mean": self.mean(row, t), "std": self.std(row, t),
                                    "per_seed": list(self.cells[row][t])} for t in self.targets},
                      "avg": {"mean": self.avg(row), "std": self.avg_std(row)}}
                for row in self.rows
            },
        }

    def to_csv(self) -> str:
        cols = ["config_hash", "method"] + [f"{t}_{s}" for t in self.targets for s in ("mean", "std")] + ["avg_mean", "avg_std"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows:
            vals = [self.config_hash, row]
            for t in self.targets:
                vals += [repr(self.mean(row, t)), repr(self.std(row, t))]
            vals += [repr(self.avg(row)), repr(self.avg_std(row))]
            w.writerow(vals)
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["Unseen domain (->)"] + self.targets + ["Avg."]
        lines = [" | ".join(head)]
        for row in self.rows:
            cells = [f"{100 * self.mean(row, t):.2f} ± {100 * self.std(row, t):.2f}" for t in self.targets]
            lines.append(" | ".join([row, *cells, f"{100 * self.avg(row):.2f}"]))
        return "\n".join(lines)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _suite(base: ExperimentConfig, variants: dict[str, ExperimentConfig], name: str,
           jobs: int) -> ResultsTable:
    by_row = {}
    for label, cfg in variants.items():
        results = run_all(cfg, jobs=jobs)
        write_run(cfg, results)
        by_row[label] = results
    table = ResultsTable.from_results(base, by_row)
    table.config_hash = base.hash()
    table.write(Path(base.output_dir) / f"{name}-{base.hash()[:12]}" / "table.csv")
    return table


def ablation_suite(base: ExperimentConfig, *, jobs: int = 1) -> ResultsTable:
    """FedAvg, w/o RP, w/o one-hot and full FedADG on identical splits and seeds."""
    base = base.replace(mode="fedadg", reference="adaptive")
    variants = {ABLATION_LABELS[m]: base.replace(mode=m) for m in ABLATION_MODES}
    return _suite(base, variants, "ablation", jobs)


def fixed_reference_suite(base: ExperimentConfig, *, jobs: int = 1) -> ResultsTable:
    """Fixed Gaussian, uniform and Laplace references against the generated one."""
    base = base.replace(mode="fedadg", reference="adaptive")
    labels = {"gaussian": "N(0, I)", "uniform": "U[-1, 1]",
              "laplace": f"Laplace({base.laplace_scale:.4g})"}
    variants = {labels[r]: base.replace(mode="fixed_ref", reference=r) for r in FIXED_REFERENCES}
    variants["FedADG"] = base
    return _suite(base, variants, "fixed-ref", jobs)


def rp_sweep(base: ExperimentConfig, ratios: Sequence[float], *, jobs: int = 1) -> tuple[Path, list[dict]]:
    """FedADG with rp_dim = ratio * feature_dim for each ratio; writes ratio,target,seed,accuracy."""
    if not ratios:
        raise ValueError("ratios must be non-empty")
    base = base.replace(mode="fedadg", reference="adaptive")
    records = []
    for ratio in ratios:
        rp_dim = int(round(ratio * base.feature_dim))
        if rp_dim < 1:
            raise ValueError(f"ratio {ratio} gives rp_dim {rp_dim} < 1")
        cfg = base.replace(rp_dim=rp_dim)
        results = run_all(cfg, jobs=jobs)
        write_run(cfg, results)
        for res in results:
            records.append({"ratio": float(ratio), "target": target_label(cfg, res.target_index),
                            "seed": res.seed, "accuracy": res.final_target_acc})
    out = Path(base.output_dir) / f"rp-sweep-{base.hash()[:12]}" / "rp_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RP_SWEEP_HEADER)
    for r in records:
        w.writerow([repr(r["ratio"]), r["target"], r["seed"], repr(r["accuracy"])])
    out.write_text(buf.getvalue())
    return out, records
