"""Command line entry point: ``dstf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import itertools
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import DataError, load_canonical, load_readings, save_canonical
from .graph import connectivity_adjacency, gaussian_kernel_adjacency, load_adjacency, read_distance_list, save_adjacency
from .model import NumericError

log = logging.getLogger("dstf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def write_json_atomic(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, default=str))
    os.replace(tmp, path)


def parse_value(text: str):
    """Parse an override value with YAML rules (numbers, booleans, null, lists)."""
    return yaml.safe_load(text)


def apply_overrides(cfg_dict: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; a bare ``key`` is looked up in model, train, then data."""
    from dataclasses import fields

    from .experiment import DataConfig
    from .model import ModelConfig
    from .training import TrainConfig

    sections = {
        "model": {f.name for f in fields(ModelConfig)},
        "train": {f.name for f in fields(TrainConfig)},
        "data": {f.name for f in fields(DataConfig)},
    }
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        if "." in key:
            section, name = key.split(".", 1)
        else:
            matches = [s for s, names in sections.items() if key in names]
            if not matches:
                raise UsageError(f"unknown config key {key!r}")
            section, name = matches[0], key
        if section not in sections or name not in sections[section]:
            raise UsageError(f"unknown config key {key!r}")
        cfg_dict.setdefault(section, {})[name] = parse_value(value)
    return cfg_dict


def resolve_config(args):
    from .experiment import ExperimentConfig

    base = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = yaml.safe_load(f) or {}
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (
        ("seed", "train.seed"),
        ("max_epochs", "train.max_epochs"),
        ("max_steps", "train.max_steps"),
        ("batch_size", "train.batch_size"),
        ("lr", "train.learning_rate"),
        ("patience", "train.patience"),
        ("adjacency", "data.adjacency"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    try:
        return ExperimentConfig.from_dict(apply_overrides(base, overrides))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def load_data_dir(data_dir, adjacency_path=None):
    data_dir = Path(data_dir)
    ds = load_canonical(data_dir)
    path = Path(adjacency_path) if adjacency_path else data_dir / "adjacency.npy"
    if path.exists():
        adj = load_adjacency(path)
    elif adjacency_path:
        raise DataError(f"adjacency file {path} not found")
    else:
        log.warning("no adjacency found in %s; static transitions are empty", data_dir)
        adj = np.zeros((ds.num_nodes, ds.num_nodes))
    if adj.shape != (ds.num_nodes, ds.num_nodes):
        raise DataError(f"adjacency shape {adj.shape} does not match {ds.num_nodes} nodes")
    return ds, adj


def _set_threads(n):
    import torch

    if n:
        torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args):
    ds = load_readings(args.input, args.layout, start=args.start, interval_minutes=args.interval, channel=args.channel)
    out = save_canonical(ds, args.out)
    print(f"wrote {ds.num_steps} steps x {ds.num_nodes} nodes x {ds.num_channels} channels to {out}")


def cmd_build_graph(args):
    node_ids = None
    if args.data:
        node_ids = list(load_canonical(args.data).node_ids or [])
    edges = read_distance_list(args.distances, node_ids or None)
    n = args.num_nodes or (len(node_ids) if node_ids else int(max(edges["from"].max(), edges["to"].max())) + 1)
    if args.kind == "gaussian":
        adj = gaussian_kernel_adjacency(edges, n, args.kappa)
    else:
        adj = connectivity_adjacency(edges, n)
    save_adjacency(adj, args.out)
    print(f"wrote {n}x{n} {args.kind} adjacency with {int((adj > 0).sum())} edges to {args.out}")


def _train(cfg, data_dir, out_dir: Path, command: str):
    import torch

    from .experiment import dataset_checksum, run_experiment

    ds, adj = load_data_dir(data_dir, cfg.data.adjacency)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_csv = out_dir / "metrics.csv"
    if metrics_csv.exists():
        metrics_csv.unlink()
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "data": str(data_dir),
        "dataset_checksum": dataset_checksum(ds, adj),
        "seed": cfg.train.seed,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "threads": torch.get_num_threads(),
        "started": _now(),
    }
    write_json_atomic(out_dir / "manifest.json", manifest)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    result = run_experiment(ds, adj, cfg, out_dir)
    result.test.to_csv(out_dir / "test_report.csv")
    summary = {
        "epochs": result.state.epoch + 1,
        "steps": result.state.global_step,
        "best_epoch": result.state.best_epoch,
        "best_val_mae": result.state.best_val_mae,
        "test_mae": result.test.overall.mae,
        "test_mae_by_horizon": [m.mae for m in result.test.horizons],
    }
    if result.baseline is not None:
        summary["ha_test_mae_by_horizon"] = [m.mae for m in result.baseline.horizons]
    manifest.update(finished=_now(), result=summary)
    write_json_atomic(out_dir / "manifest.json", manifest)
    print(result.test.table("DecoupledSTGNN"))
    if result.baseline is not None:
        print(result.baseline.table("HA").splitlines()[1])
    return summary


def cmd_train(args):
    cfg = resolve_config(args)
    _train(cfg, args.data, Path(args.out), " ".join(sys.argv))


def _checkpoint_windows(args):
    from .experiment import ExperimentConfig, prepare
    from .training import load_checkpoint

    ds, _ = load_data_dir(args.data)
    model, payload = load_checkpoint(args.checkpoint, ds.num_nodes)
    cfg = ExperimentConfig.from_dict(payload["extra"].get("experiment"))
    if cfg.data.history != model.cfg.history or cfg.data.horizon != model.cfg.horizon:
        raise UsageError("checkpoint config and model shapes disagree")
    _, train, val, test = prepare(ds, cfg)
    return ds, model, cfg, {"train": train, "val": val, "test": test}


def cmd_eval(args):
    from .evaluation import evaluate
    from .training import ModelPredictor

    _, model, cfg, splits = _checkpoint_windows(args)
    mask = cfg.train.mask_zeros if args.mask_zeros is None else args.mask_zeros
    report, _ = evaluate(ModelPredictor(model), splits[args.split], mask, cfg.train.eval_batch_size)
    if args.report:
        report.to_csv(args.report)
    print(report.table("DecoupledSTGNN"))


def select_anchors(windows, anchor=None, start=None, end=None):
    """Window indices by position (int), anchor timestamp, or a timestamp range of anchors."""
    import pandas as pd

    times = windows.dataset.timestamps[windows.anchors]
    if anchor is not None:
        try:
            i = int(anchor)
        except ValueError:
            hit = np.flatnonzero(times == pd.Timestamp(anchor))
            if not hit.size:
                raise UsageError(f"anchor {anchor} is not a window anchor in this split") from None
            return hit[:1]
        if not 0 <= i < len(windows):
            raise UsageError(f"anchor index {i} outside the split's {len(windows)} windows")
        return np.array([i])
    lo = pd.Timestamp(start) if start else times[0]
    hi = pd.Timestamp(end) if end else times[-1]
    idx = np.flatnonzero((times >= lo) & (times <= hi))
    if not idx.size:
        raise UsageError(f"no window anchors between {lo} and {hi}")
    return idx


def write_predictions(path, windows, idx, y_hat, node_ids=None):
    """CSV rows (timestamp, node, horizon, y_true, y_pred) in original units."""
    _, y, _, _ = windows.arrays(idx)
    times = windows.select(idx).target_times()
    n = y.shape[2]
    node_ids = list(node_ids) if node_ids else [str(i) for i in range(n)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "node", "horizon", "y_true", "y_pred"])
        for w in range(len(idx)):
            for h in range(y.shape[1]):
                stamp = np.datetime_as_string(times[w, h], unit="s")
                for i in range(n):
                    writer.writerow([stamp, node_ids[i], h + 1, repr(float(y[w, h, i, 0])), repr(float(y_hat[w, h, i, 0]))])
    return path


def cmd_predict(args):
    from .evaluation import predict_windows
    from .training import ModelPredictor

    ds, model, _, splits = _checkpoint_windows(args)
    windows = splits[args.split]
    idx = select_anchors(windows, args.anchor, args.start, args.end)
    sub = windows.select(idx)
    y_hat = predict_windows(ModelPredictor(model), sub)
    write_predictions(args.out, windows, idx, y_hat, ds.node_ids)
    print(f"wrote {len(idx) * windows.t_f * ds.num_nodes} rows to {args.out}")


def plot_predictions(pred_csv, nodes, out_dir, start=None, end=None, horizon: int = 1):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import pandas as pd

    df = pd.read_csv(pred_csv, dtype={"node": str}, parse_dates=["timestamp"])
    missing = {"timestamp", "node", "horizon", "y_true", "y_pred"} - set(df.columns)
    if missing:
        raise DataError(f"prediction file lacks columns {sorted(missing)}")
    df = df[df.horizon == horizon]
    if start or end:
        lo = pd.Timestamp(start) if start else df.timestamp.min()
        hi = pd.Timestamp(end) if end else df.timestamp.max()
        if hi < lo:
            raise UsageError(f"empty date range {lo} .. {hi}")
        df = df[(df.timestamp >= lo) & (df.timestamp <= hi)]
        if df.empty:
            raise UsageError(f"no predictions between {lo} and {hi}")
    known = set(df.node)
    unknown = [n for n in map(str, nodes) if n not in known]
    if unknown:
        raise UsageError(f"unknown node id(s): {', '.join(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for node in map(str, nodes):
        sel = df[df.node == node].sort_values("timestamp")
        fig, ax = plt.subplots(figsize=(10, 3))
        ax.plot(sel.timestamp, sel.y_true, label="ground truth", lw=1)
        ax.plot(sel.timestamp, sel.y_pred, label=f"horizon {horizon} prediction", lw=1)
        lo, hi = float(min(sel.y_true.min(), sel.y_pred.min())), float(max(sel.y_true.max(), sel.y_pred.max()))
        if lo == hi:
            ax.set_ylim(lo - 1.0, hi + 1.0)
        ax.set_title(f"node {node}")
        ax.legend(loc="upper right")
        fig.autofmt_xdate()
        path = out_dir / f"node_{node}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        files.append(path)
    return files


def cmd_plot(args):
    files = plot_predictions(args.predictions, args.nodes, args.out, args.start, args.end, args.horizon)
    for f in files:
        print(f)


def cmd_ablate(args):
    from .experiment import ablate

    cfg = resolve_config(args)
    try:
        derived = ablate(cfg, args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = yaml.safe_dump(derived.to_dict(), sort_keys=False)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.variant} config to {args.out}")
    else:
        sys.stdout.write(text)


def parse_grid(items) -> list[dict]:
    """``["k_s=1,2", "k_t=1..3"]`` -> list of override dicts (cartesian product)."""
    if not items:
        raise UsageError("sweep grid is empty")
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} is not of the form key=v1,v2,...")
        key, spec = item.split("=", 1)
        if ".." in spec:
            a, b = spec.split("..", 1)
            values = list(range(int(a), int(b) + 1))
        else:
            values = [parse_value(v) for v in spec.split(",") if v != ""]
        if not values:
            raise UsageError(f"grid entry {item!r} has no values")
        axes.append([(key, v) for v in values])
    return [dict(point) for point in itertools.product(*axes)]


def _point_name(point: dict) -> str:
    return "_".join(f"{k.split('.')[-1]}-{v}" for k, v in point.items())


def cmd_sweep(args):
    grid = parse_grid(args.grid)
    base = resolve_config(args).to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for point in grid:
        run_dir = out / _point_name(point)
        cfg_dict = apply_overrides(json.loads(json.dumps(base)), [f"{k}={v}" for k, v in point.items()])
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg_dict, sort_keys=False))
        jobs.append((point, run_dir))

    def run(job):
        point, run_dir = job
        cmd = [sys.executable, "-m", "dstf.cli", "--threads", str(args.threads or 1), "train",
               "--config", str(run_dir / "config.yaml"), "--data", str(args.data), "--out", str(run_dir)]
        if args.parallel > 1:
            proc = subprocess.run(cmd, capture_output=True, text=True)
            (run_dir / "stdout.log").write_text(proc.stdout + proc.stderr)
            return proc.returncode
        from .experiment import load_config

        try:
            _train(load_config(run_dir / "config.yaml"), args.data, run_dir, " ".join(cmd[2:]))
            return EXIT_OK
        except NumericError as exc:
            log.error("%s: %s", run_dir.name, exc)
            return EXIT_NUMERIC

    if args.parallel > 1:
        with ThreadPoolExecutor(args.parallel) as pool:
            codes = list(pool.map(run, jobs))
    else:
        codes = [run(job) for job in jobs]

    rows = []
    for (point, run_dir), code in zip(jobs, codes):
        row = {**point, "run_dir": str(run_dir), "exit_code": code, "val_mae": "", "test_mae": ""}
        manifest = run_dir / "manifest.json"
        if manifest.exists():
            result = json.loads(manifest.read_text()).get("result")
            if result:
                row["val_mae"], row["test_mae"] = result["best_val_mae"], result["test_mae"]
        rows.append(row)
    with (out / "summary.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} runs, summary in {out / 'summary.csv'}")
    if any(code != EXIT_OK for code in codes):
        raise NumericError("some sweep runs failed; see summary.csv")


# ---------------------------------------------------------------------------


def _add_config_flags(p, with_data=True):
    p.add_argument("--config", help="YAML file with model/train/data sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    if with_data:
        p.add_argument("--adjacency", help="adjacency .npy (default: <data>/adjacency.npy)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dstf", description="Decoupled spatial-temporal traffic forecasting")
    parser.add_argument("--version", action="version", version=f"dstf {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = reproducible)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="convert a raw archive to the canonical layout")
    p.add_argument("--input", required=True)
    p.add_argument("--layout", choices=["metr-la", "pems", "csv", "canonical"])
    p.add_argument("--out", required=True)
    p.add_argument("--start", help="first timestamp for layouts without one (pems)")
    p.add_argument("--interval", type=int, help="minutes between readings (inferred when possible)")
    p.add_argument("--channel", type=int, help="keep a single channel (pems)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("build-graph", help="build an adjacency matrix from a distance list")
    p.add_argument("--distances", required=True, help="CSV with header from,to,cost")
    p.add_argument("--kind", choices=["gaussian", "connectivity"], default="gaussian")
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--data", help="canonical data dir whose node ids map the distance list")
    p.add_argument("--num-nodes", dest="num_nodes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"), ("predict", cmd_predict, "write forecasts")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        p.set_defaults(func=func)
    eval_p, predict_p = sub.choices["eval"], sub.choices["predict"]
    eval_p.add_argument("--report", help="CSV path for per-horizon metrics")
    eval_p.add_argument("--mask-zeros", dest="mask_zeros", action=argparse.BooleanOptionalAction, default=None)
    predict_p.add_argument("--anchor", help="window index within the split, or the anchor timestamp")
    predict_p.add_argument("--start", help="first anchor timestamp of a range")
    predict_p.add_argument("--end", help="last anchor timestamp of a range")
    predict_p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="plot ground truth against predictions per node")
    p.add_argument("--predictions", required=True)
    p.add_argument("--nodes", nargs="+", required=True)
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="derive an ablation config")
    _add_config_flags(p, with_data=False)
    p.add_argument("--variant", required=True)
    p.add_argument("--out", help="output YAML (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train once per grid point")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2", help="values, or a..b integer range")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dstf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"dstf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"dstf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
