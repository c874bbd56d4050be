"""Command line interface for kpldf."""
import argparse
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

from . import evaluation, instance, ldf, nn, solver
from .exceptions import KpldfException, exception
from .helpers import fmean

_LOGGER = logging.getLogger(__name__)

GRID_SUMMARY_NAME = "grid.jsonl"
RUN_CONFIG_NAME = "config.json"

# TrainConfig fields settable from the command line.
TRAIN_FLAGS = (
    ("regime", str), ("learning_rate", float), ("lagrangian_step", float),
    ("max_grad_norm", float), ("lambda_init", float), ("k", float), ("batch_size", int),
    ("n_epochs", int), ("pretrain_epochs", int), ("early_stop", int), ("mu", float),
    ("eval_batch_size", int),
)

# Options of the non-training commands that a --config file may set, with their defaults.
COMMAND_OPTIONS = {
    "generate": {"n_items": 500, "n_instances": 30000, "seed": None, "out": None},
    "solve": {"out": None, "workers": 1},
    "evaluate": {"split": "test", "format": "table", "out": None},
    "predict": {"format": "json", "out": None},
}
OPTION_TYPES = {"n_items": int, "n_instances": int, "seed": int, "workers": int, "out": str,
                "split": str, "format": str}
OPTION_CHOICES = {"split": ("val", "test"), "format": ("table", "json")}


def _load_json(path: str) -> dict:
    """Return the JSON object stored in a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            payload = json.load(fp)
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err
    except ValueError as err:
        raise exception(-104, "%s: %s" % (path, err)) from err
    if not isinstance(payload, dict):
        raise exception(-104, "%s: config must be a JSON object" % path)
    return payload


def _write_json(payload: dict, path: str) -> None:
    """Write a JSON object to a file."""
    try:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(payload, fp, indent=2, sort_keys=True)
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err


def _apply_config(args: argparse.Namespace) -> None:
    """Fill options not given on the command line from the config file, then the defaults."""
    options = COMMAND_OPTIONS[args.command]
    payload = _load_json(args.config) if args.config else {}
    unknown = sorted(set(payload) - set(options))
    if unknown:
        raise exception(-104, "%s: keys %s do not apply to %s" % (
            args.config, ", ".join(unknown), args.command))
    for name, default in options.items():
        if getattr(args, name) is not None:
            continue
        value = payload.get(name, default)
        kind = OPTION_TYPES[name]
        if value is not None and (not isinstance(value, kind) or isinstance(value, bool)):
            raise exception(-104, "%s: %s must be %s" % (args.config, name, kind.__name__))
        if name in OPTION_CHOICES and value not in OPTION_CHOICES[name]:
            raise exception(-104, "%s: %s must be one of %s, got %r" % (
                args.config, name, ", ".join(OPTION_CHOICES[name]), value))
        setattr(args, name, value)


def _train_payload(args: argparse.Namespace) -> dict:
    """Merge the config file with flag overrides."""
    payload = _load_json(args.config) if args.config else {}
    for name, _ in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            payload[name] = value
    if args.hidden is not None:
        payload["hidden"] = args.hidden
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.no_timing:
        payload["log_timing"] = False
    return payload


def cmd_generate(args: argparse.Namespace) -> int:
    """Generate an unlabeled dataset."""
    for name in ("seed", "out"):
        if getattr(args, name) is None:
            args.parser.error("--%s is required, on the command line or in the config file" % name)
    dataset = instance.generate_dataset(args.n_items, args.n_instances, args.seed)
    instance.write_dataset(dataset, args.out)
    sizes = [len(dataset.split[name]) for name in instance.SPLITS]
    print("Generated %d instances of %d items (train/val/test %d/%d/%d) to %s" % (
        len(dataset.items), dataset.n_items, sizes[0], sizes[1], sizes[2], args.out))
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    """Label a dataset with exact optima."""
    dataset = instance.read_dataset(args.dataset)
    out = args.out or args.dataset
    if dataset.is_labeled:
        print("%s is already labeled; nothing to solve" % args.dataset)
        if os.path.abspath(out) != os.path.abspath(args.dataset):
            instance.write_dataset(dataset, out)
        return 0
    pending = sum(1 for item in dataset.items if not item.is_labeled)
    start = time.perf_counter()
    labeled = solver.label_dataset(dataset, workers=args.workers)
    elapsed = time.perf_counter() - start
    labeled.validate()
    instance.write_dataset(labeled, out)
    print("Solved %d instances in %.3f s (mean %.3f ms per instance) to %s" % (
        pending, elapsed, 1000.0 * elapsed / pending, out))
    return 0


def _run_summary(run_dir: str, selection: str) -> dict:
    """Return the best validation metric of a finished run."""
    path = os.path.join(run_dir, ldf.EPOCH_LOG_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fp:
            logs = [json.loads(line) for line in fp if line.strip()]
    except (OSError, ValueError):
        return {"best_epoch": None, "best_value": None}
    key = evaluation.CRITERIA[selection]
    best_epoch = evaluation.select_model(logs, selection) if logs else None
    best_value = None
    if best_epoch is not None:
        best_value = next(entry[key] for entry in logs if entry["epoch"] == best_epoch)
    return {"best_epoch": best_epoch, "best_value": best_value, "epochs": len(logs)}


def run_grid(dataset_path: str, payload: dict, out_dir: str, jobs: int = 1,
             verbosity: Optional[str] = "-q") -> List[dict]:
    """Train one child process per grid combination and summarize the runs."""
    combos = ldf.expand_grid(payload)
    configs = [ldf.TrainConfig.from_dict(combo) for combo in combos]
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    for index, config in enumerate(configs):
        run_dir = os.path.join(out_dir, "run_%03d" % index)
        os.makedirs(run_dir, exist_ok=True)
        config_path = os.path.join(run_dir, RUN_CONFIG_NAME)
        _write_json(config.to_dict(), config_path)
        cmd = [sys.executable, "-m", "kpldf.cli", "train", dataset_path,
               "--config", config_path, "--out", run_dir]
        if verbosity:
            cmd.append(verbosity)
        runs.append((run_dir, config, cmd))
    print("Running %d training configurations" % len(runs))

    def launch(run):
        run_dir, _, cmd = run
        _LOGGER.info("Executing: %s", " ".join(cmd))
        return subprocess.run(cmd).returncode

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        codes = list(pool.map(launch, runs))

    summary = []
    for (run_dir, config, _), code in zip(runs, codes):
        entry = {"run": os.path.basename(run_dir), "returncode": code,
                 "config_hash": config.fingerprint(), "selection": config.selection,
                 "config": config.to_dict()}
        entry.update(_run_summary(run_dir, config.selection))
        summary.append(entry)
    path = os.path.join(out_dir, GRID_SUMMARY_NAME)
    try:
        with open(path, "w", encoding="utf-8") as fp:
            for entry in summary:
                fp.write(json.dumps(entry) + "\n")
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err
    return summary


def _print_grid(summary: List[dict]) -> int:
    """Print the grid summary; return 1 if any run failed."""
    failed = 0
    for entry in summary:
        if entry["returncode"]:
            failed += 1
            print("%s: failed with exit code %d" % (entry["run"], entry["returncode"]))
        else:
            print("%s: best %s %s at epoch %s" % (entry["run"], entry["selection"],
                                                  entry["best_value"], entry["best_epoch"]))
    return 1 if failed else 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train one model, or a grid of models when the config holds list values."""
    payload = _train_payload(args)
    if "seed" not in payload:
        args.parser.error("a seed is required, from --seed or the config file")
    if len(ldf.expand_grid(payload)) > 1:
        return _print_grid(run_grid(args.dataset, payload, args.out, args.jobs))
    config = ldf.TrainConfig.from_dict(payload)
    dataset = instance.read_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    _write_json(config.to_dict(), os.path.join(args.out, RUN_CONFIG_NAME))
    result = ldf.train(dataset, config, args.out)
    print("Regime %s: best epoch %d (%s = %.6f)" % (
        config.regime, result.best_epoch, config.selection, result.best_value))
    if result.converged_epoch is None:
        print("Ran all %d epochs without converging" % len(result.log))
    else:
        print("Converged at epoch %d" % result.converged_epoch)
    if result.unfreeze_epoch is not None:
        print("Multiplier released at epoch %d; %d epochs after release" % (
            result.unfreeze_epoch, result.post_unfreeze_epochs))
    print("Wall time %.1f s over %d epochs" % (result.wall_clock_s, len(result.log)))
    return 0


def cmd_grid(args: argparse.Namespace) -> int:
    """Run a hyperparameter grid."""
    payload = _train_payload(args)
    if args.builtin_grid:
        payload["regime"] = args.builtin_grid
        payload.update(ldf.HYPERPARAMETER_GRIDS[args.builtin_grid])
    if "seed" not in payload:
        args.parser.error("a seed is required, from --seed or the config file")
    return _print_grid(run_grid(args.dataset, payload, args.out, args.jobs))


def _load_model(path: str) -> nn.ModelParams:
    """Load a checkpoint, taking the seed from its sidecar when present."""
    seed = None
    sidecar = os.path.join(os.path.dirname(path), ldf.SIDECAR_NAME)
    if os.path.exists(sidecar):
        seed = _load_json(sidecar).get("rng_seed")
    return nn.load_checkpoint(path, seed)


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Report a checkpoint's metrics on one split."""
    params = _load_model(args.checkpoint)
    dataset = instance.read_dataset(args.dataset)
    if not dataset.is_labeled:
        raise exception(-2, "%s is not labeled" % args.dataset)
    items = dataset.subset(args.split)
    report = evaluation.evaluate(params, items)
    report.meta.update({"checkpoint": args.checkpoint, "dataset": args.dataset,
                        "split": args.split, "n": len(items)})
    if args.format == "json":
        output = json.dumps(report.to_dict(), indent=2)
    else:
        output = report.format_table()
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fp:
                fp.write(output + "\n")
        except OSError as err:
            raise exception(-5, "%s: %s" % (args.out, err.strerror or err)) from err
    else:
        print(output)
    return 0


# Columns of the predict table: title, width.
PREDICT_COLUMNS = (("id", 8), ("objective", 12), ("violation", 12), ("latency_ms", 11))


def _predict_row(out: dict, fmt: str) -> str:
    """Render one prediction as a JSON line or a table row."""
    if fmt == "json":
        return json.dumps(out)
    cells = ["%d" % out["id"], "%.6f" % out["objective"], "%.6g" % out["violation"],
             "%.3f" % out["latency_ms"]]
    row = " ".join(cell.rjust(width) for cell, (_, width) in zip(cells, PREDICT_COLUMNS))
    return row + "  " + "".join(str(bit) for bit in out["x"])


def _predict_stream(params: nn.ModelParams, fmt: str, stdin, stdout) -> List[float]:
    """Predict every instance record on stdin; return the latencies."""
    latencies = []
    if fmt == "table":
        header = " ".join(title.rjust(width) for title, width in PREDICT_COLUMNS)
        stdout.write(header + "  x\n")
    for lineno, line in enumerate(stdin, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError:
            raise exception(-1, "line %d: not valid JSON" % lineno) from None
        item = instance.record_to_instance(record, lineno, default_id=len(latencies))
        item.instance.validate()
        start = time.perf_counter()
        inputs = instance.encode_inputs([item]).inputs
        _, selection = nn.predict(params, inputs)
        latency = time.perf_counter() - start
        latencies.append(latency)
        chosen = selection[0].astype(bool)
        out = {
            "id": item.id,
            "x": selection[0].tolist(),
            "objective": math.fsum(item.instance.values[chosen]),
            "violation": ldf.constraint_violation(selection[0], item.instance),
            "latency_ms": 1000.0 * latency,
        }
        stdout.write(_predict_row(out, fmt) + "\n")
    return latencies


def cmd_predict(args: argparse.Namespace, stdin=None, stdout=None) -> int:
    """Predict selections for instance records read from standard input."""
    stdin = stdin or sys.stdin
    params = _load_model(args.checkpoint)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fp:
                latencies = _predict_stream(params, args.format, stdin, fp)
        except OSError as err:
            raise exception(-5, "%s: %s" % (args.out, err.strerror or err)) from err
    else:
        latencies = _predict_stream(params, args.format, stdin, stdout or sys.stdout)
    if latencies:
        print("Predicted %d instances, mean latency %.3f ms" % (
            len(latencies), 1000.0 * fmean(latencies)), file=sys.stderr)
    return 0


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    """Add TrainConfig overrides to a subcommand."""
    for name, kind in TRAIN_FLAGS:
        flag = "--" + name.replace("_", "-")
        if name == "regime":
            parser.add_argument(flag, choices=ldf.REGIMES, default=None)
        else:
            parser.add_argument(flag, type=kind, default=None)
    parser.add_argument("--hidden", type=int, nargs=2, default=None, metavar=("H1", "H2"))
    parser.add_argument("--no-timing", action="store_true",
                        help="log null wall-clock times so epoch logs are reproducible")
    parser.add_argument("--jobs", type=int, default=1, help="parallel grid runs")


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser(
        prog="kpldf_cli", fromfile_prefix_chars="@",
        description="Knapsack approximation with Lagrangian dual training")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="generate a dataset")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--n-items", type=int, default=None, help="items per instance (default: 500)")
    p.add_argument("--n-instances", type=int, default=None,
                   help="instances in the dataset (default: 30000)")
    p.add_argument("--seed", type=int, default=None, help="required")
    p.add_argument("--out", default=None, help="dataset file to write (required)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", parents=[common], help="label a dataset with exact optima")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--out", default=None, help="labeled dataset file (default: overwrite input)")
    p.add_argument("--workers", type=int, default=None, help="solver processes (default: 1)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", parents=[common], help="run a hyperparameter grid")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON config file with list-valued grid axes")
    p.add_argument("--builtin-grid", choices=ldf.REGIMES, default=None,
                   help="use the built-in grid of a regime")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="grid directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("evaluate", parents=[common], help="report metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--split", choices=OPTION_CHOICES["split"], default=None,
                   help="split to evaluate (default: test)")
    p.add_argument("--format", choices=OPTION_CHOICES["format"], default=None,
                   help="report format (default: table)")
    p.add_argument("--out", default=None, help="report file (default: standard output)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="predict selections for JSON lines on standard input")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--format", choices=OPTION_CHOICES["format"], default=None,
                   help="output format (default: json, one line per instance)")
    p.add_argument("--out", default=None, help="output file (default: standard output)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line program and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command in COMMAND_OPTIONS:
            _apply_config(args)
        return args.func(args)
    except KpldfException as err:
        print("Error: %s" % err, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
