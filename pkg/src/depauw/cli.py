"""Command line entry point: ``depauw <experiment> [options]``.

``depauw flow`` is a direct query (no config, no report files).

Options override values from ``--config FILE`` (JSON).  With
``--server URL`` the run is submitted to a running service and polled;
otherwise it runs in-process.  Exit codes: 0 pass, 1 invariant failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from pydantic import ValidationError

from .dyadic import Dyadic, TorusPoint
from .exact_flow import FlowQuery, flow
from .experiments import EXIT_USAGE, ExperimentConfig, run

SUBCOMMANDS = {
    "field": "field-eval",
    "density": "density",
    "trace": "trace",
    "converge": "converge",
    "stochasticity": "stochasticity",
}


def _common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--server", help="submit to a running service at this URL")
    p.add_argument("--check", action="store_true", default=None, help="fail (exit 1) on invariant violations")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depauw", description="Depauw field experiments")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("field", help="evaluate the staged field")
    _common(p)
    p.add_argument("--t", dest="times", action="append", help="dyadic time, repeatable")
    p.add_argument("--point", dest="points", nargs=2, action="append", metavar=("X1", "X2"))
    p.add_argument("--mollified", action="store_true", default=None)
    p.add_argument("--eps", type=float, nargs="+")

    p = sub.add_parser("density", help="exact checkerboard transport")
    _common(p)
    p.add_argument("--depth", type=int)
    p.add_argument("--output-level", type=int)
    p.add_argument("--residual-samples", type=int)

    p = sub.add_parser("trace", help="backward path ensembles")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--field", choices=["exact", "mollified"])
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--step", type=float)
    p.add_argument("--start", type=json.loads, help='start descriptor as JSON, e.g. \'{"kind": "stratified"}\'')
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--oracle-points", type=int)
    p.add_argument("--oracle-stages", type=int)
    p.add_argument("--csv", action="store_true", default=None)
    p.add_argument("--samples-per-stage", type=int)
    p.add_argument("--cache-dir")

    p = sub.add_parser("converge", help="selection convergence as eps decreases")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--step", type=float)
    p.add_argument("--cache-dir")

    p = sub.add_parser("flow", help="exact flow of dyadic points between dyadic times")
    p.add_argument("--point", dest="points", nargs=2, action="append", required=True, metavar=("X1", "X2"))
    p.add_argument("--t-start", default="1")
    p.add_argument("--t-end", required=True)
    p.add_argument("--depth", type=int, default=30, help="max stage depth")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.add_argument("--server")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("stochasticity", help="conditional target distributions")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--start-level", type=int)
    p.add_argument("--target-level", type=int)
    p.add_argument("--start", type=json.loads)
    return parser


_NOT_CONFIG = {"command", "config", "server", "verbose"}


def make_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    if args.command:
        data["experiment"] = SUBCOMMANDS[args.command]
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            data[k] = [list(p) for p in v] if k == "points" else v
    return ExperimentConfig(**data)


def _remote(url: str, cfg: ExperimentConfig, poll: float = 1.0):
    import httpx

    url = url.rstrip("/")
    with httpx.Client(timeout=30) as client:
        r = client.post(f"{url}/runs", json=cfg.model_dump())
        if r.status_code == 422:
            print(json.dumps(r.json(), indent=1), file=sys.stderr)
            return EXIT_USAGE, None
        r.raise_for_status()
        run_id = r.json()["id"]
        while True:
            s = client.get(f"{url}/runs/{run_id}").json()
            if s["state"] == "done":
                return s["result"]["status"], s["result"]
            if s["state"] == "error":
                raise RuntimeError(s["error"])
            time.sleep(poll)


def run_flow(args) -> int:
    """Trajectory samples at every stage boundary as CSV ``point,t,x1,x2``."""
    rows = []
    for i, pt in enumerate(args.points):
        if args.server:
            import httpx

            r = httpx.post(f"{args.server.rstrip('/')}/flow", timeout=30,
                           json={"point": pt, "t_start": args.t_start, "t_end": args.t_end,
                                 "max_stage_depth": args.depth})
            if r.status_code == 422:
                print(f"depauw: {r.json()['detail']}", file=sys.stderr)
                return EXIT_USAGE
            r.raise_for_status()
            rows += [(i, s["t"], *s["point"]) for s in r.json()["samples"]]
            continue
        q = FlowQuery(Dyadic.parse(args.t_start), Dyadic.parse(args.t_end))
        res = flow(TorusPoint.of(pt), q, args.depth)
        rows += [(i, str(t), str(p.x1), str(p.x2)) for t, p in res.samples]
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        fh.write("point,t,x1,x2\n")
        for r in rows:
            fh.write(",".join(map(str, r)) + "\n")
    finally:
        if args.out:
            fh.close()
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("depauw: error: choose an experiment subcommand", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "flow":
        try:
            return run_flow(args)
        except ValueError as exc:
            print(f"depauw: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        cfg = make_config(args)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "config"
            print(f"depauw: config error in {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"depauw: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.server:
        status, result = _remote(args.server, cfg)
    else:
        res = run(cfg)
        status, result = res.status, res.model_dump()
    if result is not None:
        print(json.dumps({"status": status, "config_hash": result["config_hash"], "files": result["files"],
                          "passed": status == 0}, indent=1))
    return status


if __name__ == "__main__":
    sys.exit(main())
