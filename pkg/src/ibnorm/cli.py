"""Command-line entry point.

Subcommands: demo-compress, kde-sweep, train, probe-ib, verify. Every run
writes a manifest.json (resolved config, seed, artifact paths, timestamps,
exit status) atomically into its output directory. Exit codes: 0 success,
1 property/assertion failure, 2 usage or configuration error.

Config files are JSON; command-line flags override file values. The default
output root is ./runs, overridable with IBNORM_OUTPUT_ROOT.
"""

import argparse
import datetime as dt
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .compression import CompressionKind, CompressionParams, compress
from .autodiff import Tensor
from .density import pipeline_density_sweep, write_sweep
from .errors import ConfigError, ContractError, IBNormError
from .layers import (COMPRESS_THEN_STANDARDIZE, STANDARDIZE_THEN_COMPRESS,
                     parse_norm_name)
from .models import ModelSpec, model_spec_to_dict
from .training import TrainConfig, load_checkpoint, probe_ib, train
from .verification import run_checks

EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_USAGE = 2


def output_root():
    return os.environ.get("IBNORM_OUTPUT_ROOT", "runs")


def _utcnow():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _default_out_dir(subcommand):
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return os.path.join(output_root(), f"{subcommand}-{stamp}")


class Manifest:
    def __init__(self, subcommand, out_dir, resolved_config, seed):
        self.payload = {
            "subcommand": subcommand,
            "resolved_config": resolved_config,
            "seed": seed,
            "artifacts": [],
            "started_utc": _utcnow(),
            "ended_utc": None,
            "exit_status": None,
        }
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def add(self, *paths):
        self.payload["artifacts"].extend(os.path.abspath(p) for p in paths)

    def finish(self, exit_status):
        self.payload["ended_utc"] = _utcnow()
        self.payload["exit_status"] = exit_status
        path = os.path.join(self.out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.payload, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _load_json_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"config parse failure in {path} at line {e.lineno}, column {e.colno}: "
            f"{e.msg}") from e


def _parse_values(text):
    try:
        return np.array([float(v) for v in text.split(",") if v != ""])
    except ValueError as e:
        raise ConfigError(f"bad --values list {text!r}: {e}") from e


# ---------------------------------------------------------------------------
# demo-compress
# ---------------------------------------------------------------------------

def cmd_demo_compress(args):
    values = _parse_values(args.values)
    if values.size == 0:
        raise ConfigError("--values must contain at least one number")
    kind = CompressionKind.parse(args.kind)
    params = CompressionParams(kind=kind, lam=args.lam, group_size=values.size)
    out = compress(Tensor(values), params).array
    mu = values.mean()

    config = {"kind": kind.value, "lambda": args.lam,
              "values": values.tolist(), "csv": args.csv}
    manifest = Manifest("demo-compress", args.out_dir, config, seed=None)

    header = f"{'input':>12} {'mu':>12} {'deviation':>12} {'compressed':>12}"
    print(header)
    for v, o in zip(values, out):
        print(f"{v:12.6f} {mu:12.6f} {v - mu:12.6f} {o:12.6f}")

    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["input", "mu", "deviation", "compressed"])
            for v, o in zip(values, out):
                w.writerow([repr(float(v)), repr(float(mu)),
                            repr(float(v - mu)), repr(float(o))])
        manifest.add(args.csv)
    manifest.finish(EXIT_OK)
    return EXIT_OK


# ---------------------------------------------------------------------------
# kde-sweep
# ---------------------------------------------------------------------------

def _spec_from_entry(entry):
    extra = {}
    if "epsilon" in entry:
        extra["epsilon"] = entry["epsilon"]
    if entry.get("order") == "standardize_then_compress":
        extra["order"] = STANDARDIZE_THEN_COMPRESS
    return parse_norm_name(entry["norm"], lam=entry.get("lambda", 4.0),
                           affine=entry.get("affine", True), **extra)


def cmd_kde_sweep(args):
    cfg = _load_json_config(args.config)
    seed = int(cfg.get("seed", 0))
    n_samples = int(cfg.get("n_samples", 100_000))
    specs = [_spec_from_entry(e) for e in cfg.get("specs", [])]
    if not specs:
        raise ConfigError("kde-sweep config needs a non-empty 'specs' list")
    distributions = cfg.get("distributions", [])
    if not distributions:
        raise ConfigError("kde-sweep config needs a non-empty 'distributions' list")

    resolved = {"seed": seed, "n_samples": n_samples,
                "bandwidth": cfg.get("bandwidth"),
                "grid_points": int(cfg.get("grid_points", 512)),
                "distributions": distributions,
                "specs": cfg.get("specs")}
    manifest = Manifest("kde-sweep", args.out_dir, resolved, seed)

    for dist in distributions:
        entries = pipeline_density_sweep(
            dist["name"], dist.get("params", {}), specs,
            n_samples=n_samples, seed=seed,
            bandwidth=cfg.get("bandwidth"),
            grid_points=int(cfg.get("grid_points", 512)))
        paths = write_sweep(entries, dist["name"], manifest.out_dir)
        manifest.add(*paths)
    manifest.finish(EXIT_OK)
    print(f"kde-sweep artifacts in {manifest.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_train_config(args):
    cfg = _load_json_config(args.config) if args.config else {}
    model_cfg = dict(cfg.get("model", {}))
    train_cfg = dict(cfg.get("train", {}))

    if args.seed is not None:
        train_cfg["seed"] = args.seed
    if args.steps is not None:
        train_cfg["steps"] = args.steps
    if args.freeze_except_norm:
        train_cfg["freeze_except_norm"] = True

    norm_name = args.norm or model_cfg.get("norm", {}).get("name", "layernorm")
    lam = args.lam if args.lam is not None else \
        model_cfg.get("norm", {}).get("lambda", 4.0)
    norm_kwargs = {
        "lam": lam,
        "epsilon": model_cfg.get("norm", {}).get("epsilon", 1e-5),
        "affine": model_cfg.get("norm", {}).get("affine", True),
    }
    order = COMPRESS_THEN_STANDARDIZE
    for ablate in args.ablate or []:
        if ablate == "order":
            order = STANDARDIZE_THEN_COMPRESS
        elif ablate == "no-affine":
            norm_kwargs["affine"] = False
        else:
            raise ConfigError(f"unknown ablation {ablate!r}")
    if norm_name.startswith("ibnorm"):
        norm_kwargs["order"] = order
    elif order != COMPRESS_THEN_STANDARDIZE:
        raise ConfigError("--ablate order requires an ibnorm-* norm")
    norm_spec = parse_norm_name(norm_name, **norm_kwargs)

    topology = model_cfg.get("topology", "tiny_transformer")
    task = model_cfg.get("task",
                         "char_lm" if topology == "tiny_transformer"
                         else "synthetic_classification")
    model_spec = ModelSpec(
        topology=topology, norm=norm_spec, task=task,
        layer_widths=tuple(model_cfg.get("layer_widths", (128, 128, 128))),
        n_blocks=model_cfg.get("n_blocks", 2),
        d_model=model_cfg.get("d_model", 64),
        n_heads=model_cfg.get("n_heads", 4),
        context=model_cfg.get("context", 64))
    return model_spec, train_cfg, norm_name


def cmd_train(args):
    model_spec, train_kwargs, norm_name = _resolve_train_config(args)

    lam_grid = None
    if args.lambda_grid:
        if not norm_name.startswith("ibnorm"):
            raise ConfigError("--lambda-grid requires an ibnorm-* norm")
        lam_grid = [float(v) for v in args.lambda_grid.split(",")]

    def run_one(out_dir, spec):
        cfg = TrainConfig(**{**train_kwargs, "output_dir": out_dir})
        resolved = {"model": model_spec_to_dict(spec), "train": asdict(cfg)}
        manifest = Manifest("train", out_dir, resolved, cfg.seed)
        result = train(spec, cfg)
        manifest.add(result.checkpoint_path,
                     os.path.join(out_dir, "metrics.csv"),
                     os.path.join(out_dir, "timings.csv"),
                     os.path.join(out_dir, "run_metadata.json"))
        manifest.finish(EXIT_OK)
        last = result.metrics[-1]
        print(f"{spec.norm.label()} seed={cfg.seed}: "
              f"eval_loss={last.eval_loss:.4f} {last.metric_name}={last.eval_metric:.4f}")
        return result

    if lam_grid:
        from dataclasses import replace as dc_replace

        for lam in lam_grid:
            comp = CompressionParams(kind=model_spec.norm.compression.kind, lam=lam)
            spec = dc_replace(model_spec,
                              norm=dc_replace(model_spec.norm, compression=comp))
            run_one(os.path.join(args.out_dir, f"lam{lam:g}"), spec)
    else:
        run_one(args.out_dir, model_spec)
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe-ib
# ---------------------------------------------------------------------------

def cmd_probe_ib(args):
    from .data import make_dataset

    model, model_spec, payload = load_checkpoint(args.checkpoint)
    header = payload["header"]
    data_info = header.get("data")
    if data_info is None:
        raise ConfigError("checkpoint lacks dataset info; re-train with this version")
    dataset = make_dataset(data_info["task"], data_info["params"], data_info["seed"])

    resolved = {"checkpoint": os.path.abspath(args.checkpoint),
                "beta": args.beta, "sigma": args.sigma,
                "timesteps": args.timesteps, "batch_size": args.batch_size,
                "model": model_spec_to_dict(model_spec)}
    manifest = Manifest("probe-ib", args.out_dir, resolved,
                        seed=data_info["seed"])
    trace = probe_ib(model, dataset, beta=args.beta, sigma=args.sigma,
                     n_timesteps=args.timesteps, batch_size=args.batch_size)
    jpath = os.path.join(manifest.out_dir, "ib_trace.json")
    cpath = os.path.join(manifest.out_dir, "ib_trace.csv")
    trace.write_json(jpath)
    trace.write_csv(cpath)
    manifest.add(jpath, cpath)
    manifest.finish(EXIT_OK)
    print(f"ib_value={trace.ib_value:.6f} over {trace.n_timesteps} timesteps x "
          f"{trace.n_layers} layers -> {manifest.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args):
    results = run_checks(name_filter=args.filter, fast=args.fast)
    if not results:
        raise ConfigError(f"no checks match filter {args.filter!r}")
    manifest = Manifest("verify", args.out_dir,
                        {"filter": args.filter, "fast": args.fast}, seed=None)
    all_passed = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} ({r.elapsed_s:.2f}s)")
        if not r.passed:
            all_passed = False
            print(f"     witness: {json.dumps(r.details, default=str)}")
    report = {"all_passed": all_passed,
              "checks": [r.to_dict() for r in results]}
    rpath = args.json or os.path.join(manifest.out_dir, "verify_report.json")
    with open(rpath, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    manifest.add(rpath)
    status = EXIT_OK if all_passed else EXIT_PROPERTY_FAILURE
    manifest.finish(status)
    return status


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ibnorm",
        description="Compression-based normalization: demos, sweeps, training, "
                    "information probes and property verification.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("demo-compress", help="print a compression table")
    p.add_argument("--kind", required=True, choices=["S", "L", "T", "s", "l", "t"])
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated activations, e.g. 0,4,-4")
    p.add_argument("--csv", help="also write the table to this CSV file")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_demo_compress)

    p = sub.add_parser("kde-sweep", help="density curves per (distribution, norm)")
    p.add_argument("--config", required=True, help="JSON sweep config")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_kde_sweep)

    p = sub.add_parser("train", help="train a desk-scale model")
    p.add_argument("--config", help="JSON config with 'model' and 'train' blocks")
    p.add_argument("--norm", help="layernorm|rmsnorm|batchnorm|normalnorm|ibnorm-{s,l,t}")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambda-grid", help="comma list, e.g. 0.5,4,8 (one run each)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--freeze-except-norm", action="store_true")
    p.add_argument("--ablate", action="append", choices=["order", "no-affine"])
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("probe-ib", help="layerwise IB estimates from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--timesteps", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_probe_ib)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--filter", help="substring filter on check names")
    p.add_argument("--fast", action="store_true",
                   help="shrink sampling-heavy checks (development only)")
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out_dir is None:
        args.out_dir = _default_out_dir(args.subcommand)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IBNormError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PROPERTY_FAILURE


if __name__ == "__main__":
    sys.exit(main())
