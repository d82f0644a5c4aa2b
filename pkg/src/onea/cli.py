"""Command-line interface.

Subcommands: gen-stream (write a stream manifest), run (train and merge
over a stream, one report per strategy), merge (fuse two serialized
adapters), eval (metrics for one report), compare (table across reports).

Configuration is one flat key-value JSON document; --set KEY=VALUE flags
override file values, unknown keys are rejected, and the effective config
is echoed into every output. Exit codes: 0 success, 2 user/config error,
3 numeric failure, 4 I/O error. ONEA_THREADS caps how many strategies the
run subcommand executes in parallel.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .adapter import load_module, save_module
from .errors import (ConfigError, FormatError, NumericError, OneaError,
                     ShapeError)
from .merge import (InfoProxy, MergeConfig, info_weights, merge_average,
                    merge_modules, merge_symmetric, select_roles, thin_svd)
from .metrics import (RunReport, average_accuracy, forgetting, last_accuracy,
                      weighted_average_accuracy)
from .sim import Strategy, TrainConfig, run_sequence
from .stream import StreamSpec, TaskOrder, build_stream

RUN_DEFAULTS = {
    "classes": 20, "tasks": 5, "gamma": 0.01, "order": "permuted",
    "samples_per_class": 50, "stream_seed": 0,
    "lr": 0.1, "epochs_base": 15, "epochs_min": 2, "epochs_max": 60,
    "beta": 0.5, "lambda_min": 0.01, "lambda_max": 0.1, "k_decay": 2.3979,
    "tau_margin": 0.07, "batch_size": 32, "bottleneck": 8, "cosine_lr": False,
    "train_seed": 0,
    "quantile_q": 0.5, "kappa": 10.0, "delta": 1e-6, "rank_eps": 1e-10,
    "info_proxy": "class-count",
    "strategies": ["one-a", "average"],
    "out_dir": "runs",
}

_STREAM_KEYS = ("classes", "tasks", "gamma", "order", "samples_per_class")


def _coerce(key: str, value):
    """Validate a config value against the type of its default."""
    default = RUN_DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return value
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"config key '{key}' must be a list of strings, got {value!r}")
    return list(value)


def _load_run_config(path: str | None, overrides: list[str] | None) -> dict:
    conf = dict(RUN_DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for key, value in loaded.items():
            if key not in RUN_DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            conf[key] = _coerce(key, value)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        conf[key] = _coerce(key, value)
    return conf


def _enum_value(enum_cls, raw: str, field: str):
    try:
        return enum_cls(raw)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"config key '{field}' must be one of: {choices}; "
                          f"got '{raw}'") from None


def _build_objects(conf: dict):
    spec = StreamSpec(total_classes=conf["classes"], num_tasks=conf["tasks"],
                      gamma=conf["gamma"],
                      order=_enum_value(TaskOrder, conf["order"], "order"),
                      samples_per_class=conf["samples_per_class"],
                      seed=conf["stream_seed"])
    train = TrainConfig(lr=conf["lr"], epochs_base=conf["epochs_base"],
                        epochs_min=conf["epochs_min"], epochs_max=conf["epochs_max"],
                        beta=conf["beta"], lambda_min=conf["lambda_min"],
                        lambda_max=conf["lambda_max"], k_decay=conf["k_decay"],
                        tau_margin=conf["tau_margin"], batch_size=conf["batch_size"],
                        bottleneck=conf["bottleneck"], cosine_lr=conf["cosine_lr"],
                        seed=conf["train_seed"])
    merge_cfg = MergeConfig(quantile_q=conf["quantile_q"],
                            sharpness_kappa=conf["kappa"], delta=conf["delta"],
                            rank_eps=conf["rank_eps"],
                            info_proxy=_enum_value(InfoProxy, conf["info_proxy"],
                                                   "info_proxy"))
    strategies = [_enum_value(Strategy, s, "strategies") for s in conf["strategies"]]
    if not strategies:
        raise ConfigError("config key 'strategies' must name at least one strategy")
    return spec, train, merge_cfg, strategies


def _dump_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def cmd_gen_stream(args) -> int:
    spec = StreamSpec(total_classes=args.classes, num_tasks=args.tasks,
                      gamma=args.gamma,
                      order=_enum_value(TaskOrder, args.order, "order"),
                      samples_per_class=args.samples_per_class, seed=args.seed)
    _dump_json(build_stream(spec).manifest(), args.out)
    return 0


def cmd_run(args) -> int:
    conf = _load_run_config(args.config, args.set)
    if args.out_dir is not None:
        conf["out_dir"] = args.out_dir
    spec, train, merge_cfg, strategies = _build_objects(conf)
    stream = build_stream(spec)
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(strategy: Strategy):
        return run_sequence(stream, strategy, train, merge_cfg,
                            return_adapters=True)

    raw_threads = os.environ.get("ONEA_THREADS", "1") or "1"
    try:
        threads = int(raw_threads)
    except ValueError:
        raise ConfigError(
            f"ONEA_THREADS must be an integer, got '{raw_threads}'") from None
    if threads > 1 and len(strategies) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, strategies))
    else:
        results = [one(s) for s in strategies]

    for strategy, (report, adapters) in zip(strategies, results):
        report_path = out_dir / f"report-{strategy.value}.json"
        report_path.write_text(report.to_json() + "\n", encoding="utf-8")
        if strategy is Strategy.PER_TASK:
            for i, module in enumerate(adapters, start=1):
                save_module(module, out_dir / f"adapter-{strategy.value}-t{i}.onea")
        else:
            save_module(adapters[0], out_dir / f"adapter-{strategy.value}.onea")
        print(f"{strategy.value}: final accuracy "
              f"{report.step_acc[-1]:.4f} -> {report_path}")
    return 0


def cmd_merge(args) -> int:
    accumulated = load_module(args.accumulated)
    new = load_module(args.new)
    merge_cfg = MergeConfig(quantile_q=args.quantile_q, sharpness_kappa=args.kappa,
                            delta=args.delta, rank_eps=args.rank_eps,
                            info_proxy=_enum_value(InfoProxy, args.proxy,
                                                   "info_proxy"))
    strategy = _enum_value(Strategy, args.strategy, "strategy")
    if strategy is Strategy.ONE_A:
        base, align = select_roles(new, accumulated)
        print(f"base: task {base.meta.task_id} ({base.meta.sample_count} samples), "
              f"align: task {align.meta.task_id} ({align.meta.sample_count} samples)")
        for i, (base_layer, align_layer) in enumerate(zip(base.layers, align.layers)):
            w_b, w_a = info_weights(base.meta, align.meta, base_layer,
                                    align_layer, merge_cfg)
            rank = thin_svd(base_layer, rank_eps=merge_cfg.rank_eps).effective_rank
            print(f"layer {i}: effective rank {rank}, w_b={w_b:.6f}, w_a={w_a:.6f}")
        merged = merge_modules(new, accumulated, merge_cfg)
    elif strategy is Strategy.AVERAGE:
        merged = merge_average(new, accumulated, args.n_prev)
        print(f"averaged {len(merged.layers)} layers with n_prev={args.n_prev}")
    elif strategy is Strategy.SYMMETRIC:
        w_b, w_a = info_weights(accumulated.meta, new.meta, accumulated.layers[0],
                                new.layers[0], merge_cfg)
        print(f"symmetric blocks weighted w_acc={w_b:.6f}, w_new={w_a:.6f}")
        merged = merge_symmetric(new, accumulated, w_b, w_a, merge_cfg)
    else:
        raise ConfigError(f"merge supports one-a, average, symmetric; "
                          f"got '{strategy.value}'")
    save_module(merged, args.out)
    print(f"wrote {args.out}")
    return 0


def _metrics_row(report: RunReport) -> dict:
    value = forgetting(report)
    return {
        "strategy": report.strategy,
        "last_accuracy": last_accuracy(report),
        "avg_accuracy": average_accuracy(report),
        "weighted_avg_accuracy": weighted_average_accuracy(report),
        "forgetting": value,
        "svd_calls": report.svd_calls,
        "merge_ms": float(sum(report.timings.get("merge_ms", []))),
    }


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def cmd_eval(args) -> int:
    report = RunReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    row = _metrics_row(report)
    keys = ["last_accuracy", "avg_accuracy", "weighted_avg_accuracy", "forgetting"]
    print(json.dumps({k: row[k] for k in keys}, sort_keys=True, indent=2))
    print(",".join(_csv_cell(row[k]) for k in keys))
    return 0


def cmd_compare(args) -> int:
    reports = [RunReport.from_json(Path(p).read_text(encoding="utf-8"))
               for p in args.reports]
    first = reports[0]
    for other in reports[1:]:
        if other.stream_seed != first.stream_seed:
            raise ConfigError("reports come from different stream seeds "
                              f"({first.stream_seed} vs {other.stream_seed})")
        for key in _STREAM_KEYS:
            if other.config.get(key) != first.config.get(key):
                raise ConfigError(f"reports disagree on stream key '{key}'")
    rows = [_metrics_row(r) for r in reports]
    header = ["strategy", "last_accuracy", "avg_accuracy",
              "weighted_avg_accuracy", "forgetting", "svd_calls", "merge_ms"]
    lines = [",".join(header)]
    lines += [",".join(_csv_cell(row[k]) for k in header) for row in rows]
    print("\n".join(lines))
    if args.out_json:
        _dump_json({"schema_version": 1, "stream_seed": first.stream_seed,
                    "rows": rows}, args.out_json)
    if args.out_csv:
        Path(args.out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onea",
        description="Asymmetric adapter fusion for step-imbalanced "
                    "class-incremental learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-stream", help="write a task-stream manifest")
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--tasks", type=int, required=True)
    gen.add_argument("--gamma", type=float, default=0.01)
    gen.add_argument("--order", default="permuted",
                     choices=[o.value for o in TaskOrder])
    gen.add_argument("--samples-per-class", type=int, default=50)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=None, help="output file (default stdout)")
    gen.set_defaults(func=cmd_gen_stream)

    run = sub.add_parser("run", help="train over a stream and write reports")
    run.add_argument("--config", default=None, help="flat JSON config file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    run.add_argument("--out-dir", default=None)
    run.set_defaults(func=cmd_run)

    merge = sub.add_parser("merge", help="merge two serialized adapters")
    merge.add_argument("accumulated", help="path of the carried .onea module")
    merge.add_argument("new", help="path of the newly trained .onea module")
    merge.add_argument("--out", required=True)
    merge.add_argument("--strategy", default="one-a",
                       choices=["one-a", "average", "symmetric"])
    merge.add_argument("--quantile-q", type=float, default=0.5)
    merge.add_argument("--kappa", type=float, default=10.0)
    merge.add_argument("--delta", type=float, default=1e-6)
    merge.add_argument("--rank-eps", type=float, default=1e-10)
    merge.add_argument("--proxy", default="class-count",
                       choices=[p.value for p in InfoProxy])
    merge.add_argument("--n-prev", type=int, default=1,
                       help="tasks already absorbed (average strategy)")
    merge.set_defaults(func=cmd_merge)

    ev = sub.add_parser("eval", help="print metrics for one report")
    ev.add_argument("report")
    ev.set_defaults(func=cmd_eval)

    cmp_ = sub.add_parser("compare", help="tabulate metrics across reports")
    cmp_.add_argument("reports", nargs="+")
    cmp_.add_argument("--out-csv", default=None)
    cmp_.add_argument("--out-json", default=None)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OneaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
