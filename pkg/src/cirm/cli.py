"""``cirm`` command line: run experiments, materialize data, check oracles, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

import cirm
from cirm.envs import find_idx_pair, save_env
from cirm.harness import (Cell, ExperimentPlan, MetricsRecord, aggregate, held_out_environment, run_sequence,
                          training_environments)
from cirm.runconfig import ConfigError, RunConfig, parse_config

CSV_COLUMNS = ("experiment", "method", "seed", "env_index", "phase", "metric", "value", "wall_time_ms")


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def load_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def _input_bytes(plan: ExperimentPlan) -> bytes:
    """Bytes of any IDX inputs, so the manifest hash covers the data too."""
    if not plan.data_dir:
        return b""
    out = b""
    for train in (True, False):
        pair = find_idx_pair(plan.data_dir, train)
        if pair:
            out += b"".join(Path(p).read_bytes() for p in pair)
    return out


class ResultsWriter:
    """Append-only CSV; every row is flushed so partial results stay readable."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        self.fh = path.open("w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(CSV_COLUMNS)
        self.fh.flush()

    def write(self, records) -> None:
        with self.lock:
            for r in records:
                self.writer.writerow([r.experiment, r.method, r.seed, r.env_index, r.phase, r.metric,
                                      repr(float(r.value)), f"{r.wall_time_ms:.1f}"])
            self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_results(path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError("", f"{path} lacks columns {sorted(missing)}")
        return [MetricsRecord(row["method"], int(row["seed"]), int(row["env_index"]), row["phase"], row["metric"],
                              float(row["value"]), float(row["wall_time_ms"]), row["experiment"])
                for row in reader]


def summary_rows(records, group_by=("method", "phase")) -> list[dict]:
    cells = aggregate(records, keys=tuple(group_by) + ("metric",))
    rows = []
    for key, cell in sorted(cells.items()):
        row = dict(zip(tuple(group_by) + ("metric",), key))
        row.update(mean=cell.mean, std=cell.std, n=cell.n, flagged=cell.flagged)
        rows.append(row)
    return rows


def format_cell(cell: Cell, metric: str) -> str:
    return cell.format(100.0, 1) if metric == "accuracy" else cell.format(1.0, 3)


def render_table(records, group_by: str = "method") -> str:
    """Rows per ``group_by`` value, columns train/test, cells ``mean (std)``."""
    cells = aggregate(records, keys=(group_by, "phase", "metric"))
    groups = sorted({k[0] for k in cells})
    lines = [f"{group_by:<12} {'train':>14} {'test':>14}"]
    for g in groups:
        parts = []
        for phase in ("train", "test"):
            hit = [(k, c) for k, c in cells.items() if k[0] == g and k[1] == phase]
            parts.append(format_cell(hit[0][1], hit[0][0][2]) + ("*" if hit[0][1].flagged else "") if hit else "-")
        lines.append(f"{str(g):<12} {parts[0]:>14} {parts[1]:>14}")
    if any(c.flagged for c in cells.values()):
        lines.append("* single run; std reported as 0")
    return "\n".join(lines)


# -- subcommands ------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.plan.seeds = [args.seed]
        cfg.plan.repetitions = 1
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "content_hash": cfg.content_hash(_input_bytes(cfg.plan)),
        "cirm_version": cirm.__version__,
        "numpy_version": np.__version__,
        "seeds": list(cfg.plan.seeds),
        "jobs": args.jobs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    held_out_environment(cfg.plan)  # build the shared test set before any worker starts
    writer = ResultsWriter(out / "results.csv")
    tasks = [(m, s) for m in cfg.methods for s in cfg.plan.seeds]
    all_records: list[MetricsRecord] = []

    def one(task):
        spec, seed = task
        t0 = time.perf_counter()
        log(f"[{cfg.experiment}] {spec.id} seed {seed}: start")
        recs = run_sequence(cfg.plan, spec.config(seed), seed, experiment=cfg.experiment)
        log(f"[{cfg.experiment}] {spec.id} seed {seed}: done in {time.perf_counter() - t0:.1f}s")
        return recs

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(args.jobs) as pool:
                # results are written in task order so the file is the same for any job count
                for recs in pool.map(one, tasks):
                    writer.write(recs)
                    all_records += recs
        else:
            for task in tasks:
                recs = one(task)
                writer.write(recs)
                all_records += recs
    finally:
        writer.close()
    rows = summary_rows(all_records)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(render_table(all_records))
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir) / "data"
    seeds = [args.seed] if args.seed is not None else cfg.plan.seeds
    for seed in seeds:
        for i, env in enumerate(training_environments(cfg.plan, seed)):
            path = save_env(env, out, f"seed{seed}_env{i}")
            log(f"wrote {path}")
    path = save_env(held_out_environment(cfg.plan), out, "test")
    log(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    from cirm.validation import run_checks

    failed = 0
    for name, ok, detail in run_checks():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def cmd_report(args) -> int:
    records = read_results(args.results)
    if not records:
        raise ConfigError("", f"{args.results} holds no records")
    print(render_table(records, args.group_by))
    if args.out:
        rows = summary_rows(records, (args.group_by, "phase"))
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cirm", description="Continual invariant risk minimization experiments.")
    p.add_argument("--version", action="version", version=f"cirm {cirm.__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="run this single seed instead of the config's seeds")
    r.add_argument("--jobs", type=int, default=1, help="parallel (method, seed) runs")
    r.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    r.set_defaults(func=cmd_run)
    g = sub.add_parser("gen-data", help="write environment caches")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen_data)
    v = sub.add_parser("validate", help="run the numerical oracle checks")
    v.set_defaults(func=cmd_validate)
    rep = sub.add_parser("report", help="summarize a results.csv")
    rep.add_argument("results")
    rep.add_argument("--group-by", default="method", choices=("method", "experiment", "seed", "env_index"))
    rep.add_argument("--out", default=None, help="also write the summary as CSV")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) < 1:
        log("error: --jobs must be >= 1")
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        log(f"config error: {exc}")
        return 2
    except Exception as exc:  # runtime failure
        log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
