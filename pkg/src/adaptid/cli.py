"""Command-line entry point: ``adaptid run | selftest | print-config``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

from adaptid.harness import STRATEGIES, RunConfig, monte_carlo

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

OUTPUT_ENV = "ADAPTID_OUTPUT_DIR"
RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
CLI_FIELDS = ("runs", "strategies", "output_dir", "workers", "verbosity")
VERBOSITY = ("debug", "info", "warning", "error")


@dataclass
class CliConfig:
    run: RunConfig = field(default_factory=RunConfig)
    runs: int = 100
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    output_dir: str = "results"
    workers: int = 1
    verbosity: str = "warning"

    def __post_init__(self):
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ValueError(f"runs: must be an integer >= 1, got {self.runs!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ValueError(f"workers: must be an integer >= 1, got {self.workers!r}")
        if isinstance(self.strategies, str):
            self.strategies = [self.strategies]
        if not self.strategies:
            raise ValueError("strategies: must name at least one strategy")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"strategies: unknown strategy {s!r}; expected one of {STRATEGIES}")
        if self.verbosity not in VERBOSITY:
            raise ValueError(f"verbosity: must be one of {VERBOSITY}")

    def to_dict(self) -> dict:
        out = self.run.to_dict()
        out.pop("strategy")
        out.update(runs=self.runs, strategies=list(self.strategies), output_dir=self.output_dir,
                   workers=self.workers, verbosity=self.verbosity)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _decode_infinities(value):
    # JSON has no infinity literal that every writer emits, so accept strings too
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "-inf", "infinity", "-infinity"):
        return -math.inf if value.strip().startswith("-") else math.inf
    if isinstance(value, list):
        return [_decode_infinities(v) for v in value]
    return value


def config_from_dict(doc: dict) -> CliConfig:
    """Validate a flat key-value document against the known fields; defaults fill the rest."""
    doc = dict(doc)
    unknown = sorted(set(doc) - RUN_FIELDS - set(CLI_FIELDS))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    if "strategy" in doc:
        doc.setdefault("strategies", [doc["strategy"]])
        doc.pop("strategy")
    cli_kw = {k: doc.pop(k) for k in CLI_FIELDS if k in doc}
    run_kw = {k: _decode_infinities(v) for k, v in doc.items()}
    strategies = cli_kw.get("strategies", list(STRATEGIES))
    if isinstance(strategies, str):
        strategies = [strategies]
    bad = [x for x in strategies if x not in STRATEGIES]
    if bad:
        raise ValueError(f"strategies: unknown strategy {bad[0]!r}; expected one of {STRATEGIES}")
    run_kw["strategy"] = strategies[0] if strategies else "adaptive"
    run = RunConfig(**run_kw)
    return CliConfig(run=run, **cli_kw)


def load_document(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".json"):
        text = raw.decode()
        return json.loads(text) if text.strip() else {}
    return tomllib.loads(raw.decode())


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} must look like key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def parse_config(path=None, overrides=None) -> CliConfig:
    """File values, then inline ``key=value`` overrides (or a dict); later wins."""
    doc = load_document(path) if path else {}
    if isinstance(overrides, dict):
        doc.update(overrides)
    else:
        for item in overrides or ():
            key, value = _parse_override(item)
            doc[key] = value
    return config_from_dict(doc)


def _summary_table(cfg: CliConfig, results) -> str:
    head = f"{'strategy':<10} {'runs':>5} {'gamma':>8} {'k':>3} {'b':>3} {'final_mse':>11} {'mean_ocv':>10} {'final_crb':>11}"
    lines = [head, "-" * len(head)]
    rc = cfg.run
    for name, res in results.items():
        s = res.summary()
        lines.append(
            f"{name:<10} {s['runs']:>5} {rc.gamma:>8g} {rc.k:>3} {rc.b:>3} "
            f"{s['final_mse']:>11.3e} {s['mean_ocv_after_warmup']:>10.4f} {s['final_crb']:>11.3e}"
        )
    return "\n".join(lines)


def cmd_run(cfg: CliConfig, out=None) -> int:
    out = out or sys.stdout
    out_dir = os.environ.get(OUTPUT_ENV) or cfg.output_dir
    try:
        run_dir = os.path.join(out_dir, "runs")
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(cfg.to_json() + "\n")
    except OSError as exc:
        print(f"error: cannot write to output directory {out_dir!r}: {exc}", file=sys.stderr)
        return 2
    results = {}
    for name in cfg.strategies:
        rc = dataclasses.replace(cfg.run, strategy=name)
        t0 = time.perf_counter()
        try:
            res = monte_carlo(rc, cfg.runs, workers=cfg.workers, run_dir=run_dir)
            res.aggregate_csv(os.path.join(out_dir, f"{name}_aggregate.csv"))
        except OSError as exc:
            print(f"error: I/O failure for strategy {name}: {exc}", file=sys.stderr)
            return 2
        except Exception as exc:
            print(f"error: strategy {name} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        logging.getLogger(__name__).info("%s: %d runs in %.1f s", name, cfg.runs, time.perf_counter() - t0)
        results[name] = res
    print(_summary_table(cfg, results), file=out)
    return 0


def cmd_selftest(fault=None, out=None) -> int:
    out = out or sys.stdout
    from adaptid import selftest

    t0 = time.perf_counter()
    results = selftest.run_all(fault)
    failed = []
    for key, desc, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {key:<10} {desc}: {detail}", file=out)
        if not ok:
            failed.append(key)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s", file=out)
    if failed:
        print("failed: " + ", ".join(failed), file=out)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptid", description="Adaptive constraint-aware input design experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the Monte Carlo study for one or more strategies")
    r.add_argument("--config", help="TOML or JSON config file (flat keys); defaults reproduce the pendulum study")
    r.add_argument("--runs", type=int, help="Monte Carlo replications per strategy")
    r.add_argument("--seed", type=int, help="master seed")
    r.add_argument("--strategy", nargs="+", choices=STRATEGIES, help="strategies to run")
    r.add_argument("--out", help=f"output directory (the {OUTPUT_ENV} environment variable takes precedence)")
    r.add_argument("--workers", type=int, help="concurrent worker processes")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="inline config override")

    s = sub.add_parser("selftest", help="run the fast invariant checks")
    s.add_argument("--inject-fault", choices=["ad", "ut", "schur", "transform"], help=argparse.SUPPRESS)

    c = sub.add_parser("print-config", help="print the fully resolved config as JSON")
    c.add_argument("--config")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest(args.inject_fault)
    try:
        overrides = list(args.set)
        if args.command == "run":
            for key, val in (("runs", args.runs), ("seed", args.seed), ("workers", args.workers)):
                if val is not None:
                    overrides.append(f"{key}={val}")
            if args.strategy:
                overrides.append("strategies=" + json.dumps(args.strategy))
            if args.out:
                overrides.append("output_dir=" + json.dumps(args.out))
        cfg = parse_config(args.config, overrides)
    except (OSError, ValueError, TypeError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=cfg.verbosity.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "print-config":
        print(cfg.to_json())
        return 0
    return cmd_run(cfg)


if __name__ == "__main__":
    sys.exit(main())
