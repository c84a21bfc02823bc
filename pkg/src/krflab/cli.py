"""``krf`` command line.

Exit codes: 0 pass, 1 identity failure (or failed scenario), 2 usage or
configuration error, 3 flow breakdown.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from ._alloc import retain_freed_memory
from .flow import CheckpointError, ConfigError, RunResult, checkpoint_load, load_config, resume, run
from .grid import GridError
from .monitors import emit_plotdata, theorem1_verdict, w_bound_check, write_csv, write_reports, _jsonable
from .scenarios import SCENARIOS, identity_suite, run_scenario

EXIT_OK, EXIT_IDENTITY, EXIT_USAGE, EXIT_BREAKDOWN = 0, 1, 2, 3

log = logging.getLogger("krflab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit 2 like config errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _write_run_artifacts(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    write_csv(result.records, out / "monitors.csv", cfg.m_max, cfg.k_max)
    reports = [w_bound_check(result)] if result.records and result.completed else []
    write_reports(reports, out / "reports.json")
    summary = {
        "format": "krflab-summary v1",
        "version": __version__,
        "config": cfg.to_dict(),
        "termination": result.termination,
        "detail": result.detail,
        "breakdown": result.breakdown,
        "steps": result.steps,
        "records": len(result.records),
        "sup_f": result.sup_f,
        "f_user_supplied": result.f_user_supplied,
        "final_ric_sup": result.final_ric_sup,
        "verdict": theorem1_verdict(result) if result.records else None,
    }
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2) + "\n", encoding="ascii")
    emit_plotdata(result, out / "plotdata")


def _finish_run(result: RunResult, out: Path, started: float) -> int:
    _write_run_artifacts(result, out)
    # wall-clock goes to stderr only, so artifacts stay byte-identical across runs
    print(f"{result.termination}: {result.steps} steps, {len(result.records)} records "
          f"({time.perf_counter() - started:.2f}s)", file=sys.stderr)
    if result.termination != "reached_t_end":
        print(f"breakdown: {result.detail}", file=sys.stderr)
        return EXIT_BREAKDOWN
    return EXIT_OK


def cmd_check_identities(args) -> int:
    reports = identity_suite(args.seeds, args.n, args.N, tol=args.tol)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:22s} seed={r.extra['seed']:<3d} residual={r.residual:.3e} "
              f"tol={r.tolerance:.3e}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_reports(reports, Path(args.out) / "identities.json", n=args.n, N=args.N, seeds=args.seeds)
    ok = all(r.passed for r in reports)
    print(f"identity suite: {'all passed' if ok else 'FAILURES'} ({len(reports)} checks)")
    return EXIT_OK if ok else EXIT_IDENTITY


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.fixed_dt is not None:
        cfg = cfg.with_overrides(dt_fixed=args.fixed_dt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    result = run(cfg, checkpoint_path=out / "checkpoint.krf" if cfg.checkpoint_cadence else None)
    return _finish_run(result, out, started)


def cmd_resume(args) -> int:
    path = Path(args.checkpoint)
    out = Path(args.out) if args.out else path.parent
    started = time.perf_counter()
    problem, _, _ = checkpoint_load(path)
    result = resume(path, checkpoint_path=path if problem.config.checkpoint_cadence else None)
    return _finish_run(result, out, started)


def cmd_scenario(args) -> int:
    if args.name not in SCENARIOS:
        print(f"unknown scenario {args.name!r}; known: {', '.join(SCENARIOS)}", file=sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    outcome = run_scenario(args.name, _overrides(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    verdict = {"format": "krflab-verdict v1", **outcome.verdict}
    (out / "verdict.json").write_text(json.dumps(_jsonable(verdict), indent=2) + "\n", encoding="ascii")
    if outcome.reports:
        write_reports(outcome.reports, out / "reports.json", scenario=args.name)
    for i, res in enumerate(outcome.results):
        if res.records:
            sub = out / (f"run{i}" if len(outcome.results) > 1 else "run")
            sub.mkdir(parents=True, exist_ok=True)
            write_csv(res.records, sub / "monitors.csv", res.config.m_max, res.config.k_max)
            emit_plotdata(res, sub / "plotdata")
    print(f"{args.name}: {'PASS' if outcome.passed else 'FAIL'}")
    print(f"({time.perf_counter() - started:.2f}s)", file=sys.stderr)
    return EXIT_OK if outcome.passed else EXIT_IDENTITY


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="krf", description="Kähler-Ricci flow laboratory on complex tori")
    p.add_argument("--version", action="version", version=f"krflab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ci = sub.add_parser("check-identities", help="frozen-time identity suite on seeded random states")
    ci.add_argument("--seeds", type=int, default=10)
    ci.add_argument("--n", type=int, default=1)
    ci.add_argument("--N", type=int, default=64)
    ci.add_argument("--tol", type=float, default=1e-8)
    ci.add_argument("--out", default=None)
    ci.set_defaults(func=cmd_check_identities)

    r = sub.add_parser("run", help="integrate a flow from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--fixed-dt", type=float, default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("scenario", help="run a named scenario and write a verdict")
    s.add_argument("name")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scenario)

    rs = sub.add_parser("resume", help="continue a checkpointed run")
    rs.add_argument("--checkpoint", required=True)
    rs.add_argument("--out", default=None)
    rs.set_defaults(func=cmd_resume)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    retain_freed_memory()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GridError, CheckpointError) as exc:
        print(f"krf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
