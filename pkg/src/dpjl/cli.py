"""Command-line entry point: ``dpjl {train,account,estimate-norms,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from dpjl import __version__
from dpjl.autodiff import Model, save_checkpoint
from dpjl.data import DataError, Dataset, gen_synthetic, load_csv, load_idx
from dpjl.io import (ConfigError, RunManifest, apply_overrides, export_curve_csv, fmt_float,
                     format_spec_comment, load_config)
from dpjl.jl import estimate_norms, exact_norms
from dpjl.optim import TrainConfig, train
from dpjl.pld import (DEFAULT_CLAMP, DEFAULT_DELTA_EPS, GridExhaustedError, MechanismSpec,
                      account)
from dpjl.rng import derive_stream
from dpjl.stats import QuadratureSpec
from dpjl.tradeoff import EXACT, jl_mechanism_curve, subsample_curve

__all__ = ["main", "build_run", "SAMPLING_ASSUMPTION"]

SAMPLING_ASSUMPTION = ("subsampled mixture p*f+(1-p)*Id with p=B/N under add/remove neighbors; "
                       "the trainer's fixed-size sampling only approximates it")
_CONFIG_KEYS = {"seed", "output_dir", "data", "model", "train", "accountant"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- config resolution


def _load_dataset(spec: dict, seed: int) -> Dataset:
    spec = dict(spec)
    source = spec.pop("source", "synthetic")
    limit_train = spec.pop("limit_train", None)
    limit_test = spec.pop("limit_test", None)
    if source == "synthetic":
        ds = gen_synthetic(spec.pop("kind"), int(spec.pop("n")), int(spec.pop("seed", seed)),
                           spec.pop("params", None), float(spec.pop("test_fraction", 0.2)))
    elif source == "idx":
        ds = load_idx(spec.pop("train_images"), spec.pop("train_labels"), spec.pop("num_classes", None))
        if "test_images" in spec:
            ds = ds.with_test(load_idx(spec.pop("test_images"), spec.pop("test_labels"),
                                       ds.num_classes))
    elif source == "csv":
        kw = {k: spec.pop(k) for k in ("label_column", "feature_columns", "num_classes") if k in spec}
        ds = load_csv(spec.pop("train"), **kw)
        if "test" in spec:
            ds = ds.with_test(load_csv(spec.pop("test"), **kw))
    else:
        raise ConfigError(f"unknown data source {source!r}; choose synthetic, idx or csv")
    if spec:
        raise ConfigError(f"unknown data keys {sorted(spec)}")
    if limit_train is not None or limit_test is not None:
        ds = ds.subset(limit_train, limit_test)
    return ds


def build_run(cfg: dict) -> tuple[Dataset, Model, TrainConfig]:
    """Dataset, model and training config described by a run config."""
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in ("data", "model", "train"):
        if not isinstance(cfg.get(key), dict):
            raise ConfigError(f"config needs a {key!r} object")
    seed = int(cfg.get("seed", 0))
    try:
        dataset = _load_dataset(cfg["data"], seed)
        model = Model.from_config(cfg["model"])
        tc = dict(cfg["train"])
        tc.setdefault("seed", seed)
        config = TrainConfig(**tc)
    except (KeyError, TypeError, ValueError, OSError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid config: {type(err).__name__}: {err}") from None
    return dataset, model, config


def _accountant_settings(cfg: dict) -> dict:
    acc = dict(cfg.get("accountant") or {})
    return {"delta": acc.get("delta"), "delta_eps": float(acc.get("delta_eps", DEFAULT_DELTA_EPS)),
            "clamp": float(acc.get("clamp", DEFAULT_CLAMP)),
            "quad_tolerance": float(acc.get("quad_tolerance", QuadratureSpec().relative_tolerance))}


# ---------------------------------------------------------------- commands


def _cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.override)
    dataset, model, config = build_run(cfg)
    out = Path(cfg.get("output_dir", "runs/latest"))
    acc = _accountant_settings(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        result = train(config, model, dataset, metrics_path=metrics_path)
        ckpt = save_checkpoint(out / "checkpoint", model, result.params, {"step": result.state.t})
        results = {"steps": result.state.t}
        if result.metrics:
            last = result.metrics[-1]
            results.update(train_acc=last.train_acc, test_acc=last.test_acc)
        if acc["delta"] is not None and config.is_private:
            if config.noise_scale == 0:
                results["epsilon"] = None
                print("noise_scale=0: no privacy guarantee, accountant skipped", file=sys.stderr)
            elif result.state.t > 0:
                r = int(config.jl_dim) if config.is_jl and not config.norm_oracle else EXACT
                clip = np.atleast_1d(config.clip_norm)
                if clip.size > 1 and not np.all(clip == clip[0]):
                    print("note: accounting assumes the same mechanism at every step", file=sys.stderr)
                spec = MechanismSpec(config.noise_scale, r, config.batch_size / dataset.n_train,
                                     result.state.t)
                res = account(spec, float(acc["delta"]), acc["delta_eps"],
                              QuadratureSpec(relative_tolerance=acc["quad_tolerance"]), acc["clamp"])
                results["epsilon"] = res.epsilon
                print(f"epsilon={fmt_float(res.epsilon)} delta={acc['delta']!r} {spec.describe()} "
                      f"assumption=\"{SAMPLING_ASSUMPTION}\"")
        manifest = RunManifest("train", cfg, config.seed,
                               {"metrics": str(metrics_path), "checkpoint": str(ckpt)}, acc,
                               results=results)
        manifest.write(out / "run_manifest.json")
    except (ValueError, ArithmeticError, OSError) as err:
        raise RuntimeError(str(err)) from err
    for row in result.metrics:
        print(f"epoch={row.epoch} step={row.step} train_loss={row.train_loss:.6g} "
              f"train_acc={row.train_acc:.4f} test_acc={row.test_acc:.4f} "
              f"clip_fraction={row.clip_fraction:.4f}")
    return 0


def _cmd_account(args) -> int:
    if not args.sigma > 0:
        raise UsageError("--sigma must be > 0 (sigma = 0 gives no privacy)")
    if not 0 < args.delta < 1:
        raise UsageError("--delta must lie in (0, 1)")
    r = EXACT if args.exact else args.jl_dim
    try:
        spec = MechanismSpec(args.sigma, r, args.sample_rate, args.steps)
    except ValueError as err:
        raise UsageError(str(err)) from None
    quad = QuadratureSpec(relative_tolerance=args.quad_tol)
    res = account(spec, args.delta, args.delta_eps, quad, args.clamp)
    print(f"epsilon={fmt_float(res.epsilon)} delta={args.delta!r} {spec.describe()} "
          f"delta_eps={args.delta_eps!r} clamp={args.clamp!r} quad_tol={args.quad_tol!r} "
          f"widened_clamp={max(res.clamp_by_direction.values())!r} assumption=\"{SAMPLING_ASSUMPTION}\"")
    if args.curve:
        comment = format_spec_comment(spec.sigma, r, spec.sample_rate, spec.steps, args.delta_eps,
                                      clamp=args.clamp, quad_tol=args.quad_tol)
        eps = np.linspace(0.0, max(2.0 * res.epsilon, 1.0), 401)
        path = Path(args.curve)
        export_curve_csv((eps, res.delta_at(eps)), path, comment)
        single = subsample_curve(jl_mechanism_curve(spec.sigma, r, quad), spec.sample_rate)
        single_path = path.with_name(path.stem + "_tradeoff" + (path.suffix or ".csv"))
        one_step = format_spec_comment(spec.sigma, r, spec.sample_rate, 1, args.delta_eps,
                                       clamp=args.clamp, quad_tol=args.quad_tol)
        export_curve_csv(single, single_path, one_step)
    return 0


def _cmd_estimate_norms(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.override)
    dataset, model, config = build_run(cfg)
    if args.r < 1 or args.trials < 1:
        raise UsageError("--r and --trials must be >= 1")
    out = Path(args.out) if args.out else Path(cfg.get("output_dir", "runs/latest")) / "norm_diagnostics.csv"
    n = min(args.samples or config.batch_size, dataset.n_train)
    x, y = dataset.x[:n], dataset.y[:n]
    params = model.init_params(derive_stream(config.seed, "init"))
    exact = exact_norms(model, params, x, y)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "exact_norm", "estimate", "r", "seed"])
        for k in range(args.trials):
            seed = config.seed + k
            est = estimate_norms(model, params, x, y, args.r, derive_stream(seed, "jl-proj/diagnostic"))
            for i in range(n):
                w.writerow([i, fmt_float(exact[i]), fmt_float(est.values[i]), args.r, seed])
    print(f"wrote {n * args.trials} rows to {out}")
    return 0


def _parse_optimizer(item: str) -> tuple[str, int | None]:
    name, _, r = item.strip().partition(":")
    return name, (int(r) if r else None)


def _cmd_bench(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.override)
    dataset, model, base = build_run(cfg)
    if args.epochs < 5 or args.warmup < 1:
        raise UsageError("bench needs --epochs >= 5 and --warmup >= 1")
    rows = []
    for item in args.optimizers.split(","):
        name, r = _parse_optimizer(item)
        tc = base.to_dict()
        tc.update(optimizer=name, steps=None, epochs=args.warmup + args.epochs, record_wall_time=True)
        if r is not None:
            tc["jl_dim"] = r
        try:
            config = TrainConfig(**tc)
        except ValueError as err:
            raise UsageError(f"{item}: {err}") from None
        m = Model.from_config(model.config())
        result = train(config, m, dataset)
        secs = [row.epoch_seconds for row in result.metrics[args.warmup:]]
        steps = max(result.state.t, 1)
        rows.append((item.strip(), statistics.median(secs), m.counters.reverse / steps,
                     m.counters.tangent / steps, m.counters.peak_grad_floats))
    header = ("optimizer", "seconds_per_epoch", "reverse_per_step", "tangent_per_step",
              "peak_grad_floats")
    lines = [header] + [(o, fmt_float(s), fmt_float(rv), fmt_float(tg), str(pk))
                        for o, s, rv, tg, pk in rows]
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(sink, lineterminator="\n")
        w.writerows(lines)
    finally:
        if args.out:
            sink.close()
    return 0


# ---------------------------------------------------------------- parser


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a finite number > 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpjl", description="Private training with JL norm estimates and its accountant.")
    p.add_argument("--version", action="version", version=f"dpjl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("account", help="epsilon of T subsampled JL-clipped Gaussian steps")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--sample-rate", type=float, required=True)
    a.add_argument("--steps", type=int, required=True)
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--jl-dim", type=int)
    g.add_argument("--exact", action="store_true", help="exact per-sample clipping (Z = 1)")
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--curve", help="write the (epsilon, delta) curve here and the single-step "
                                   "tradeoff curve next to it (suffix _tradeoff)")
    a.add_argument("--delta-eps", type=_positive_float, default=DEFAULT_DELTA_EPS)
    a.add_argument("--clamp", type=_positive_float, default=DEFAULT_CLAMP)
    a.add_argument("--quad-tol", type=_positive_float, default=QuadratureSpec().relative_tolerance)
    a.set_defaults(func=_cmd_account)

    e = sub.add_parser("estimate-norms", help="JL estimates vs exact per-sample gradient norms")
    e.add_argument("--config", required=True)
    e.add_argument("--r", type=int, required=True)
    e.add_argument("--trials", type=int, required=True)
    e.add_argument("--samples", type=int, help="number of training samples (default: batch size)")
    e.add_argument("--out")
    e.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=_cmd_estimate_norms)

    b = sub.add_parser("bench", help="median seconds per epoch for several optimizers")
    b.add_argument("--config", required=True)
    b.add_argument("--optimizers", required=True,
                   help="comma-separated names; name:r sets the JL dimension, e.g. dp-sgd-jl:5")
    b.add_argument("--epochs", type=int, default=5, help="timed epochs (>= 5)")
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--out")
    b.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError, DataError) as err:
        print(str(err), file=sys.stderr)
        return 1
    except (GridExhaustedError, RuntimeError, ValueError, ArithmeticError, OSError) as err:
        print(f"dpjl: runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
