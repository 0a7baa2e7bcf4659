"""``acgm`` command line: train, evaluate, depth sweeps, edge dropping, DAG checks.

Exit codes: 0 success, 2 bad input (config, arguments, checkpoint, matrix
file), 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import os
import subprocess
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import __version__, dagmath
from .config import ConfigError, RunConfig, format_config, load_config
from .tinynet import CheckpointFormatError
from .trainer import (METRIC_COLUMNS, Model, TrainingDiverged, evaluate, load_checkpoint, save_checkpoint,
                      train)

EXIT_INPUT = 2
EXIT_DIVERGED = 3

EVAL_COLUMNS = ("episodes", "mean_return", "std_return", "edges_mean", "nilpotent_mean", "violation_rate")
SWEEP_COLUMNS = ("depth", "mean_return", "std_return", "violation_rate")
DROP_COLUMNS = ("drop", "mean_return", "std_return")


class InputError(Exception):
    pass


def build_id() -> str:
    """``acgm <version>`` plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"acgm {__version__}" + (f" ({rev})" if rev else "")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.9g" % v
    return str(v)


def header_lines(config_text: Optional[str]) -> List[str]:
    lines = [f"# build: {build_id()}"]
    if config_text is not None:
        lines.append("# config")
        lines += [f"#   {line}" for line in config_text.splitlines()]
    return lines


def csv_text(columns: Sequence[str], rows: Iterable[dict], config_text: Optional[str]) -> str:
    buf = io.StringIO()
    for line in header_lines(config_text):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def emit(text: str, out: Optional[str]) -> None:
    if out:
        write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# argument helpers


def seed_override(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get("ACGM_SEED")
    if raw is not None and raw.strip():
        try:
            cfg.run.seed = int(raw)
        except ValueError:
            raise InputError(f"ACGM_SEED must be an integer, got {raw!r}") from None
    return cfg


def read_config(path: str) -> RunConfig:
    try:
        return seed_override(load_config(path))
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None


def read_checkpoint(path: str) -> Model:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint: {exc}") from None
    except (CheckpointFormatError, ConfigError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from None


def parse_matrix(text: str) -> np.ndarray:
    """Whitespace-separated 0/1 rows; ragged or non-binary input is rejected."""
    rows = [line.split() for line in text.splitlines() if line.split() and not line.lstrip().startswith("#")]
    if not rows:
        raise InputError("matrix file is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InputError(f"ragged rows: widths {sorted(widths)}")
    if widths.pop() != len(rows):
        raise InputError(f"matrix is {len(rows)}x{len(rows[0])}, expected square")
    try:
        A = np.array([[int(x) for x in r] for r in rows], dtype=np.int64)
    except ValueError:
        raise InputError("entries must be 0 or 1") from None
    if not np.isin(A, (0, 1)).all():
        raise InputError("entries must be 0 or 1")
    return A


def read_matrix(path: str) -> np.ndarray:
    try:
        return parse_matrix(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read matrix: {exc}") from None


def drop_list(text: str) -> List[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok == "inf":
            out.append(math.inf)
            continue
        try:
            n = int(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad drop count {tok!r}") from None
        if n < 0:
            raise argparse.ArgumentTypeError(f"drop count must be nonnegative, got {n}")
        out.append(n)
    return out


def k_list(text: str) -> List[int]:
    try:
        ks = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depth list {text!r}") from None
    if any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("depths must be >= 1")
    return ks


def eval_seed(model: Model, seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    raw = os.environ.get("ACGM_SEED")
    return int(raw) if raw and raw.strip() else model.config.run.seed


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    out_dir = Path(cfg.run.out_dir) / cfg.run.run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = format_config(cfg)
    metrics = out_dir / "metrics.csv"
    tmp = metrics.with_name(metrics.name + ".tmp")

    with tmp.open("w") as fh:
        for line in header_lines(config_text):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)

        def on_row(row):
            w.writerow([fmt(row[c]) for c in METRIC_COLUMNS])

        def on_checkpoint(episode, model):
            save_checkpoint(out_dir / f"ckpt_{episode}.acgm", model)

        try:
            result = train(cfg, on_row=on_row, on_checkpoint=on_checkpoint)
        except TrainingDiverged as exc:
            fh.close()
            tmp.replace(metrics)
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    tmp.replace(metrics)
    save_checkpoint(out_dir / "ckpt_final.acgm", result.model)
    print(f"wrote {metrics} and {out_dir / 'ckpt_final.acgm'}")
    return 0


def cmd_eval(args) -> int:
    model = read_checkpoint(args.checkpoint)
    override = args.override
    if override not in (None, "empty", "g528"):
        override = read_matrix(override)
    try:
        s = evaluate(model, args.episodes, seed=eval_seed(model, args.seed), override=override)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    row = {c: getattr(s, c) for c in EVAL_COLUMNS}
    emit(csv_text(EVAL_COLUMNS, [row], format_config(model.config)), args.out)
    return 0


def cmd_depth_sweep(args) -> int:
    cfg = read_config(args.config)
    rows = []
    for k in args.k:
        run = dataclasses.replace(cfg, generator=dataclasses.replace(cfg.generator, k=k))
        try:
            result = train(run)
        except TrainingDiverged as exc:
            print(f"error: training diverged at depth {k}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        s = evaluate(result.model, args.episodes, seed=cfg.run.seed)
        rows.append({"depth": k, "mean_return": s.mean_return, "std_return": s.std_return,
                     "violation_rate": s.violation_rate})
        print(f"depth {k}: mean return {s.mean_return:.4g}", file=sys.stderr)
    emit(csv_text(SWEEP_COLUMNS, rows, format_config(cfg)), args.out)
    return 0


def cmd_edge_drop(args) -> int:
    model = read_checkpoint(args.checkpoint)
    override = "g528" if args.baseline else None
    seed = eval_seed(model, args.seed)
    rows = []
    for n in args.drops:
        try:
            s = evaluate(model, args.episodes, seed=seed, override=override, drop=n)
        except (ValueError, AssertionError) as exc:
            raise InputError(str(exc)) from None
        rows.append({"drop": "inf" if math.isinf(n) else int(n), "mean_return": s.mean_return,
                     "std_return": s.std_return})
    emit(csv_text(DROP_COLUMNS, rows, format_config(model.config)), args.out)
    return 0


def dag_report(A: np.ndarray) -> List[str]:
    cycle = dagmath.find_cycle(A)
    lines = [f"acyclic={'true' if cycle is None else 'false'}", f"edges={dagmath.edge_count(A)}"]
    if cycle is None:
        lines.append(f"nilpotent_index={dagmath.nilpotent_index(A)}")
        lines.append("order=" + " ".join(map(str, dagmath.topological_order(A))))
    else:
        lines.append("cycle=" + "->".join(map(str, cycle)))
    return lines


def cmd_dag_check(args) -> int:
    A = read_matrix(args.matrix)
    print("\n".join(dag_report(A)))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acgm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=build_id())
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with greedy actions")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--override", help="matrix file, 'empty' or 'g528'")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="write CSV here instead of stdout")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("depth-sweep", help="train and evaluate one run per depth bound")
    d.add_argument("config")
    d.add_argument("--k", type=k_list, required=True, help="comma-separated depths, e.g. 1,2,3")
    d.add_argument("--episodes", type=int, default=1000, help="evaluation episodes per depth")
    d.add_argument("--out")
    d.set_defaults(func=cmd_depth_sweep)

    x = sub.add_parser("edge-drop", help="evaluate with random edges removed from every graph")
    x.add_argument("checkpoint")
    x.add_argument("--drops", type=drop_list, default=drop_list("0,1,3,5,7,9,15,inf"))
    x.add_argument("--episodes", type=int, default=1000)
    x.add_argument("--baseline", action="store_true", help="use the fixed 28-edge baseline graph")
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(func=cmd_edge_drop)

    c = sub.add_parser("dag-check", help="report acyclicity, edges and depth of a 0/1 matrix file")
    c.add_argument("matrix")
    c.set_defaults(func=cmd_dag_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "episodes", 0) is not None and getattr(args, "episodes", 0) < 0:
        print("error: --episodes must be >= 0", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
