"""Command-line front end: ``train``, ``evaluate``, ``compare`` and ``validate``.

Exit codes: 0 success, 1 a validation check failed, 2 configuration error,
3 training aborted on a non-finite loss or gradient.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .countsim import evaluate_policy
from .domains import build_domain
from .model import ObservationModel
from .nets import load_checkpoint, save_checkpoint
from .trainer import VARIANTS, TrainConfig, TrainingAborted, train

log = logging.getLogger("collective_ac")

METRIC_COLUMNS = ("iteration", "return_mean", "return_stderr", "critic_loss",
                  "actor_grad_norm", "elapsed_ms")
EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    domain: dict
    observation: str = "o1"
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    metrics_format: str = "csv"
    record_wall_time: bool = False

    def to_json(self):
        d = asdict(self)
        d["train"] = {k: v for k, v in d["train"].items() if k != "observation"}
        return d

    def digest(self):
        """Hash of everything that determines the metrics (not output location or threads)."""
        d = self.to_json()
        d.pop("output_dir")
        d["train"].pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _referenced_files(domain):
    (kind, params), = domain.items()
    if kind == "file":
        yield params["path"] if isinstance(params, dict) else params
    elif isinstance(params, dict) and "demand_csv" in params:
        yield params["demand_csv"]


def parse_run_config(doc, base_dir=".") -> RunConfig:
    """Validate a configuration document; relative file paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    dom = doc.get("domain")
    if not isinstance(dom, dict) or len(dom) != 1:
        raise ConfigError("'domain' must name exactly one of grid, taxi or file")
    (kind, params), = dom.items()
    if kind not in ("grid", "taxi", "file"):
        raise ConfigError(f"unknown domain {kind!r}")
    dom = {kind: dict(params) if isinstance(params, dict) else params}
    p = dom[kind]
    if kind == "file" and not isinstance(p, dict):
        dom[kind] = p = {"path": p}
    for key in ("path", "demand_csv"):
        if isinstance(p, dict) and key in p:
            p[key] = str(Path(base_dir) / p[key])
    for path in _referenced_files(dom):
        if not Path(path).is_file():
            raise ConfigError(f"referenced file not found: {path}")

    obs = doc.get("observation", "o1")
    tdoc = dict(doc.get("train", {}))
    tknown = {f.name for f in fields(TrainConfig)} - {"observation"}
    bad = set(tdoc) - tknown
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    try:
        tc = TrainConfig(observation=obs, **tdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    fmt = doc.get("metrics_format", "csv")
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"metrics_format must be csv or jsonl, got {fmt!r}")
    return RunConfig(dom, obs, tc, str(doc.get("output_dir", "runs/default")), fmt,
                     bool(doc.get("record_wall_time", False)))


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc, Path(path).parent)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    tc = cfg.train
    if getattr(args, "seed", None) is not None:
        tc = replace(tc, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        tc = replace(tc, workers=args.workers)
    variant = getattr(args, "variant", None)
    if isinstance(variant, str):
        tc = replace(tc, variant=variant)
    out = getattr(args, "out", None) or cfg.output_dir
    return replace(cfg, train=tc, output_dir=out)


def build_model(cfg: RunConfig):
    try:
        model = build_domain(cfg.domain)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"domain: {exc}") from None
    return model, ObservationModel.for_model(model, cfg.observation)


class MetricsWriter:
    """Streams evaluation records as CSV rows or JSON lines with a fixed column set."""

    def __init__(self, path, fmt="csv", wall_time=False):
        self.fmt, self.wall_time = fmt, wall_time
        self.fh = open(path, "w", newline="")
        if fmt == "csv":
            self.writer = csv.writer(self.fh, lineterminator="\n")
            self.writer.writerow(METRIC_COLUMNS)
        self.fh.flush()

    def _value(self, rec, key):
        v = rec[key]
        if key == "elapsed_ms" and not self.wall_time:
            v = None
        if isinstance(v, float) and not math.isfinite(v):
            v = None if self.fmt == "jsonl" else repr(v)
        return v

    def write(self, rec):
        vals = [self._value(rec, k) for k in METRIC_COLUMNS]
        if self.fmt == "csv":
            self.writer.writerow(["" if v is None else v for v in vals])
        else:
            self.fh.write(json.dumps(dict(zip(METRIC_COLUMNS, vals))) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def version_string():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_training(cfg: RunConfig, out: Path, model, obs):
    """Train one configuration into ``out``; returns the metrics."""
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if cfg.metrics_format == "csv" else "jsonl"
    manifest = {
        "config": cfg.to_json(),
        "config_sha256": cfg.digest(),
        "seed": cfg.train.seed,
        "version": version_string(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    writer = MetricsWriter(out / f"metrics.{ext}", cfg.metrics_format, cfg.record_wall_time)
    try:
        policy, critic, metrics = train(model, obs, cfg.train, on_record=writer.write,
                                        checkpoint_dir=out)
    finally:
        writer.close()
    save_checkpoint(out / "checkpoint.npz", policy, critic, None,
                    {"observation": cfg.observation, "config_sha256": cfg.digest(),
                     "iterations": cfg.train.iterations})
    return metrics


def cmd_train(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    model, obs = build_model(cfg)
    out = Path(cfg.output_dir)
    try:
        metrics = run_training(cfg, out, model, obs)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"final return {_fmt_return(metrics.final_return(), _last_se(metrics))}; "
          f"outputs in {out}")
    return EXIT_OK


def _last_se(metrics):
    return metrics.records[-1]["return_stderr"] if metrics.records else float("nan")


def _fmt_return(mean, se):
    se_txt = "n/a" if not math.isfinite(se) else f"{se:.4f}"
    return f"{mean:.4f} +/- {se_txt}"


def cmd_evaluate(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    model, obs = build_model(cfg)
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    try:
        policy, _, _, _ = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    d = obs.input_dim(model)
    if policy.mlp.in_dim != d or policy.mlp.out_dim != model.num_actions:
        raise ConfigError(
            f"checkpoint expects input width {policy.mlp.in_dim} and {policy.mlp.out_dim} "
            f"actions; observation {cfg.observation!r} gives {d} and {model.num_actions}")
    K = args.samples or cfg.train.eval_samples
    if K < 1:
        raise ConfigError("--samples must be >= 1")
    rng = np.random.default_rng([cfg.train.seed, 3])
    mean, se = evaluate_policy(model, policy, obs, K, rng)
    print(f"return {_fmt_return(mean, se)} over {K} samples")
    return EXIT_OK


def _split(text, conv=str):
    return [conv(x) for x in text.split(",") if x.strip()]


def cmd_compare(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    variants = []
    for v in args.variant or []:
        variants += _split(v)
    variants = variants or [cfg.train.variant]
    if len(set(variants)) != len(variants):
        raise ConfigError(f"duplicate variant names in {variants}")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    try:
        seeds = _split(args.seeds, int) if args.seeds else [cfg.train.seed]
    except ValueError:
        raise ConfigError(f"bad --seeds list {args.seeds!r}") from None
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {seeds}")
    model, obs = build_model(cfg)
    root = Path(cfg.output_dir)
    finals = {}
    curves = []
    for v in variants:
        for s in seeds:
            run = replace(cfg, train=replace(cfg.train, variant=v, seed=s))
            try:
                metrics = run_training(run, root / v / f"seed{s}", model, obs)
            except TrainingAborted as exc:
                print(f"{v} seed {s} aborted: {exc}; checkpoint {exc.checkpoint}",
                      file=sys.stderr)
                return EXIT_NUMERIC
            finals[v, s] = metrics.final_return()
            curves += [(v, s, r["iteration"], r["return_mean"]) for r in metrics.records]
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "final_return"])
        for (v, s), val in finals.items():
            w.writerow([v, s, repr(val)])
    with open(root / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "iteration", "return_mean"])
        w.writerows([(v, s, it, repr(val)) for v, s, it, val in curves])
    ranked = sorted(variants, key=lambda v: -np.mean([finals[v, s] for s in seeds]))
    print("variant  mean_final  std_final")
    for v in ranked:
        vals = np.array([finals[v, s] for s in seeds])
        print(f"{v:7s}  {vals.mean():10.4f}  {vals.std(ddof=1) if len(vals) > 1 else 0.0:9.4f}")
    return EXIT_OK


def cmd_validate(args):
    from .validation import run_all

    results = run_all(seed=args.seed or 0, scale=args.scale)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"failed check: {r.name} measured {r.value!r}", file=sys.stderr)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="collective-ac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="overrides train.seed")
        sp.add_argument("--workers", type=int, help="sampling threads (1 is bit-reproducible)")
        sp.add_argument("--out", help="overrides output_dir")

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", type=int, help="number of count samples K")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="train several variants over several seeds")
    common(sp)
    sp.add_argument("--variant", action="append",
                    help="variant name(s), repeatable or comma separated")
    sp.add_argument("--seeds", help="comma separated seeds")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("validate", help="run the oracle checks")
    common(sp, config=False)
    sp.add_argument("--scale", choices=("small", "full"), default="small")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
