"""Command line entry point: ``netrisk <stage> --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .pipeline import STAGE_ORDER, ConfigError, RunConfig, StageError

logger = logging.getLogger("netrisk")


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, items: list[str]) -> dict:
    """Apply ``block.key=value`` overrides (values parsed as YAML scalars)."""
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a block")
        node[parts[-1]] = _parse_value(val)
    return raw


def load_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        base = path.parent
    else:
        raw, base = {}, Path.cwd()
    raw = apply_overrides(raw, args.set)
    if args.out:
        raw["output_dir"] = str(Path(args.out).resolve())
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    for key in ("intraday", "ff5", "vix", "skew_index", "volume"):
        v = getattr(args, key, None)
        if v:
            raw.setdefault("inputs", {})[key] = str(Path(v).resolve())
    if args.command == "run":
        if args.stages:
            raw["stages"] = [s.strip() for s in args.stages.split(",") if s.strip()]
    elif args.command in STAGE_ORDER:
        raw["stages"] = [args.command]
    return RunConfig.from_dict(raw, base_dir=base)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--workers", type=int, help="worker processes (NETRISK_WORKERS overrides)")
    p.add_argument("--seed", type=int, help="root random seed")
    p.add_argument("--set", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                   help="override any config key, e.g. qbll.n_draws=200")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netrisk", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "intraday prices -> realized volatility, returns, sizes",
        "estimate": "time-varying VAR posterior draws",
        "connect": "band connectedness quantiles",
        "factors": "double sorts and NET factors",
        "betas": "rolling factor betas",
        "fmb": "Fama-MacBeth prices of risk",
        "sort": "quintile sorts on betas",
        "controls": "control factor series",
        "simulate": "economy simulation and moment checks",
        "report": "summary tables (markdown and CSV)",
    }
    for name in STAGE_ORDER:
        p = sub.add_parser(name, help=helps[name])
        _common(p)
        if name == "ingest":
            p.add_argument("--intraday", help="long CSV: date, time, asset, price")
        if name in ("betas", "fmb", "sort", "controls"):
            p.add_argument("--ff5", help="FF5 CSV: date, mkt_rf, smb, hml, rmw, cma, rf, mom")
        if name == "controls":
            p.add_argument("--vix")
            p.add_argument("--skew-index", dest="skew_index")
            p.add_argument("--volume")
        if name == "report":
            p.add_argument("--kind", default="all", choices=["all", *pipeline.REPORTS])
    p = sub.add_parser("run", help="run several stages in order")
    _common(p)
    p.add_argument("--stages", help="comma separated subset (default: stages in config)")
    p = sub.add_parser("demo", help="write the synthetic demo panel and its config")
    p.add_argument("directory")
    p.add_argument("--assets", type=int, default=10)
    p.add_argument("--days", type=int, default=300)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "demo":
            from .demo import write_demo

            path = write_demo(args.directory, args.assets, args.days, args.data_seed)
            print(path)
            return 0
        cfg = load_config(args)
        if args.command == "report" and args.kind != "all":
            for p in pipeline.write_report(cfg.output_dir, args.kind):
                print(p)
            return 0
        res = pipeline.run(cfg)
    except StageError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name in res.executed:
        print(f"{name}: done")
    for name in res.cached:
        print(f"{name}: cached")
    return res.status


if __name__ == "__main__":
    sys.exit(main())
