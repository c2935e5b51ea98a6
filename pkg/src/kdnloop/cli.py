"""Command line entry point: ``run``, ``compare`` and ``validate``."""

import argparse
import json
import os
import sys
from importlib import resources

from .config import CONTROLLERS, ConfigError, ScenarioConfig, load_config, validate_config

OUT_ENV = "KDNLOOP_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def parse_seeds(text: str) -> list:
    """``"1..5"`` (inclusive), ``"1,3,7"`` or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 1..5 or 1,2,3") from None


def parse_controllers(text: str) -> list:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in CONTROLLERS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown controllers {bad}; choose from {','.join(CONTROLLERS)}")
    return names


def bundled_config(name: str) -> str:
    return str(resources.files("kdnloop") / "scenarios" / f"{name}.json")


def _load(args) -> ScenarioConfig:
    path = args.config or bundled_config("stress")
    cfg = load_config(path)
    over = {}
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "controller", None) is not None:
        over["controller"] = args.controller
    if over:
        cfg = ScenarioConfig.model_validate({**cfg.model_dump(), **over})
    validate_config(cfg)
    return cfg


def _out(args, cfg) -> str:
    return args.out or os.environ.get(OUT_ENV) or cfg.output_dir


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdnloop", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one controller on one seed")
    r.add_argument("--config", help="scenario JSON (default: bundled stress scenario)")
    r.add_argument("--controller", choices=CONTROLLERS)
    r.add_argument("--seed", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")
    r.add_argument("--plots", action="store_true", help="also write a per-run delay SVG")

    c = sub.add_parser("compare", help="run controllers x seeds and aggregate")
    c.add_argument("--config")
    c.add_argument("--controllers", type=parse_controllers, default=list(CONTROLLERS))
    c.add_argument("--seeds", type=parse_seeds, default=[1, 2, 3, 4, 5])
    c.add_argument("--steps", type=int)
    c.add_argument("--out")
    c.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    v = sub.add_parser("validate", help="check a scenario config and exit")
    v.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as e:
        for loc, msg in e.errors:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"ok: {cfg.name} ({cfg.steps} steps, hash {cfg.digest()[:12]})")
        return EXIT_OK

    from .harness import compare_controllers, run_scenario
    try:
        if args.command == "run":
            bundle, res = run_scenario(cfg, out=_out(args, cfg))
            if args.plots:
                from .plots import compose, line_panel
                p = bundle.trace_csv.parent / "delay.svg"
                p.write_text(compose([line_panel("Mean delay (ms)", {res.controller: res.trace.mean_delay})],
                                     [640]))
            print(json.dumps(res.report.to_dict() | {"controller": res.controller, "seed": res.seed},
                             sort_keys=True))
            return EXIT_OK
        comp = compare_controllers(cfg, args.controllers, args.seeds, _out(args, cfg), args.jobs)
        for (ctrl, seed), err in comp.errors.items():
            print(f"run failed: {ctrl} seed {seed}: {err.splitlines()[0]}", file=sys.stderr)
        print(f"wrote {comp.csv_path}")
        return EXIT_RUNTIME if comp.errors else EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
