"""Command-line entry point: ``eacgm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure. Every run writes ``<primary output>.manifest.json`` last.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone

from . import __version__
from .detect import DetectorConfig, read_report, run_pipeline, score_with_model, write_report
from .errors import DataError, EacgmError, NumericError
from .evaluate import evaluate_flags, render_grid, run_kmeans, sensitivity_sweep, write_grid_csv
from .events import Layer
from .gmm import load_model, save_model
from .traceio import (
    DEFAULT_PROBES,
    default_manifest_path,
    export_perfetto,
    load_probe_specs,
    read_trace,
    resolve_attach_plan,
    write_trace,
)
from .workload import WorkloadConfig, load_config, ratio_report, read_labels, simulate, write_labels

log = logging.getLogger("eacgm")

SEED_ENV = "EACGM_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_k_range(text: str) -> list[int]:
    """'2..6' (inclusive), '2,3,5' or '4'."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            ks = list(range(int(lo), int(hi) + 1))
        else:
            ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K range {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"bad K range {text!r}")
    return ks


def parse_q_list(text: str) -> list[float]:
    try:
        qs = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad q list {text!r}") from None
    if not qs or any(not 0 < q < 1 for q in qs):
        raise argparse.ArgumentTypeError(f"q values must lie in (0, 1): {text!r}")
    return qs


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _method_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return env if env is not None else 0


def _k_arg(ks: list[int]):
    return ks[0] if len(ks) == 1 else tuple(ks)


def _detector_config(args, k) -> DetectorConfig:
    q = None if args.delta is not None else (args.quantile if args.quantile is not None else 0.01)
    return DetectorConfig(
        layer=Layer.parse(args.layer),
        k=k,
        delta=args.delta,
        quantile_q=q,
        train_window=args.train_window,
        seed=_method_seed(args),
        init=args.init,
        use_mixture=args.mixture,
    )


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args, run):
    cfg = load_config(args.config) if args.config else WorkloadConfig()
    env = _env_seed()
    if args.seed is not None:
        cfg.seed = args.seed
    elif env is not None:
        cfg.seed = env
    events, labels = simulate(cfg)
    write_trace(events, args.out)
    run.output(args.out)
    if args.labels:
        write_labels(labels, args.labels)
        run.output(args.labels)
    run.seeds["workload"] = cfg.seed
    n_norm, n_anom, ratio = ratio_report(labels)
    print(f"{len(events)} events, {n_norm} normal / {n_anom} anomalous (ratio {ratio:.3f})")


def cmd_resolve(args, run):
    manifest = args.manifest or default_manifest_path()
    specs = load_probe_specs(args.probes) if args.probes else list(DEFAULT_PROBES)
    plan = resolve_attach_plan(manifest, specs)
    text = json.dumps(plan.to_json(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        run.output(args.out)
    else:
        sys.stdout.write(text)
    for e in plan.entries:
        log.info("resolved %s -> %s @0x%x in %s", e.spec.symbol_pattern, e.resolved_symbol, e.address, e.source_library)
    for s in plan.unresolved:
        print(f"unresolved: {s.symbol_pattern} ({s.library_hint})", file=sys.stderr)


def cmd_train(args, run):
    from .detect import fit_layer, prepare_layer

    events = read_trace(args.trace)
    cfg = _detector_config(args, _k_arg(args.k))
    model = fit_layer(prepare_layer(events, cfg), cfg)
    save_model(model, args.out)
    run.output(args.out)
    run.seeds["method"] = cfg.seed
    rep = model.fit_report
    print(f"K={model.k} iterations={rep.iterations} converged={rep.converged} logL={rep.final_log_likelihood:.6f}")


def cmd_detect(args, run):
    events = read_trace(args.trace)
    if args.model:
        run.inputs.append(args.model)
        model = load_model(args.model)
        cfg = _detector_config(args, model.k)
        report = score_with_model(events, model, cfg)
    else:
        cfg = _detector_config(args, _k_arg(args.k))
        report, _ = run_pipeline(events, None, cfg)
    write_report(report, args.report)
    run.output(args.report)
    run.seeds["method"] = cfg.seed
    print(f"{int(report.flags.sum())} of {report.n} {cfg.layer.value} events flagged (delta={report.delta:.6g})")


def cmd_evaluate(args, run):
    labels = read_labels(args.labels)
    results = []
    if args.report:
        header, rows = read_report(args.report)
        flags = [r["flagged"] for r in rows]
        idx = [r["event_index"] for r in rows]
        results.append(
            evaluate_flags(labels, flags, idx, method="gmm", layer=header.get("layer"), params={"K": header.get("K"), "delta": header.get("delta")})
        )
    else:
        if not args.trace:
            raise UsageError("evaluate needs --report or --trace")
        if not args.layer:
            raise UsageError("evaluate --trace needs --layer")
        events = read_trace(args.trace)
        base = _detector_config(args, args.k)
        for seed in range(base.seed, base.seed + args.seeds):
            cfg = replace(base, seed=seed)
            _, summary = run_pipeline(events, labels, cfg)
            results.append(replace(summary, params={**summary.params, "seed": seed}))
            if args.baseline == "kmeans":
                _, km = run_kmeans(events, labels, cfg)
                results.append(replace(km, params={**km.params, "seed": seed}))
    payload = [r.to_json() for r in results]
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        run.output(args.out)
    for r in results:
        seed = r.params.get("seed", "-")
        print(f"{r.method:<7} seed={seed} acc={r.accuracy:.4f} prec={r.precision:.4f} recall={r.recall:.4f} f1={r.f1:.4f}")


def cmd_sweep(args, run):
    events = read_trace(args.trace)
    labels = read_labels(args.labels)
    seed0 = _method_seed(args)
    seeds = list(range(seed0, seed0 + args.seeds))
    base = DetectorConfig(layer=Layer.parse(args.layer), train_window=args.train_window, init=args.init, use_mixture=args.mixture)
    cells = sensitivity_sweep(events, labels, base.layer, args.k, args.q, seeds, base)
    write_grid_csv(cells, args.out)
    run.output(args.out)
    run.seeds["method"] = seeds
    sys.stdout.write(render_grid(cells))


def cmd_export(args, run):
    events = read_trace(args.trace)
    export_perfetto(events, args.out)
    run.output(args.out)
    print(f"wrote {len(events)} trace events to {args.out}")


# -- plumbing ----------------------------------------------------------------


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = argv
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.seeds: dict = {}
        self.started = time.time()

    def output(self, path: str) -> None:
        self.outputs.append(path)

    def write(self) -> str | None:
        if not self.outputs:
            return None
        path = self.outputs[0] + ".manifest.json"
        body = {
            "command": self.command,
            "argv": self.argv,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seeds": self.seeds,
            "tool_version": __version__,
            "started_at": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_clock_s": round(time.time() - self.started, 6),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2)
            fh.write("\n")
        return path


def _add_detector_flags(p, k_default="2", layer_required=True):
    p.add_argument("--layer", required=layer_required, help="cuda, python, torch, nccl or gpusample")
    p.add_argument("--k", type=parse_k_range, default=parse_k_range(k_default), help="K, or a..b to pick K by BIC")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-window", type=float, default=0.5)
    p.add_argument("--init", choices=["kmeans++", "random"], default="kmeans++")
    p.add_argument("--mixture", action="store_true", help="threshold mixture density instead of best component")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--quantile", type=float, default=None, help="calibrate delta as this train-density quantile (default 0.01)")
    g.add_argument("--delta", type=float, default=None, help="fixed density threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eacgm", description="Trace analysis and GMM anomaly detection for ML workloads.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a labeled synthetic trace")
    p.add_argument("--config", help="workload config JSON (default: built-in 5:1 dataset)")
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("resolve", help="resolve probe specs against a symbol manifest")
    p.add_argument("--manifest", help="nm-style manifest (default: bundled fixture)")
    p.add_argument("--probes", help="JSON list of probe specs (default: built-in six)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("train", help="fit a GMM on the train split and save it")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score a trace and write a detection report")
    p.add_argument("--trace", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--model", help="saved model from `train` (otherwise fit here)")
    _add_detector_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--report", help="detection report to score")
    p.add_argument("--trace", help="run the pipeline on this trace instead")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--baseline", choices=["none", "kmeans"], default="none")
    p.add_argument("--out")
    _add_detector_flags(p, layer_required=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="K x q sensitivity sweep")
    p.add_argument("--trace", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--k", type=parse_k_range, required=True)
    p.add_argument("--q", type=parse_q_list, required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="first seed")
    p.add_argument("--train-window", type=float, default=0.5)
    p.add_argument("--init", choices=["kmeans++", "random"], default="kmeans++")
    p.add_argument("--mixture", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-perfetto", help="convert a trace to Chrome trace-event JSON")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "evaluate":
            if len(args.k) != 1:
                raise UsageError("evaluate needs a single K")
            args.k = args.k[0]
        if getattr(args, "seeds", 1) < 1:
            raise UsageError("--seeds must be at least 1")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    run = RunManifest(args.command, argv)
    for attr in ("config", "trace", "labels", "manifest", "probes"):
        val = getattr(args, attr, None)
        if val and not (attr == "labels" and args.command == "simulate"):
            run.inputs.append(val)
    try:
        args.func(args, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (DataError, EacgmError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    run.write()
    return 0


if __name__ == "__main__":
    sys.exit(main())
