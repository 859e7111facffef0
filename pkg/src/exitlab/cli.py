"""Command-line interface.

Subcommands map onto the experiment scenarios plus the symbolic tools::

    exitlab simulate        --config cfg.json [--eps ... --paths ... --out ...]
    exitlab saddle-exit     --lp --lm --delta --y2 --eps ... --paths ...
    exitlab levinson        --eps ... --paths ...
    exitlab condition1d     --config scenario.json
    exitlab normalform      --field field.json --order R [--ratio P Q]
    exitlab quasipotential  --from X --to Y [--domain LO HI] --out path.csv
    exitlab hetero          --rates LP LM MUP MUM --eps ... --paths ...
    exitlab report          --in report.json

Each run writes CSV samples plus a versioned JSON report; the process
exits 0 only when every configured test passed.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import fields, hetero, ldp, normalform
from .harness import ExperimentConfig, run_experiment


def _add_common(p, paths_default=1000):
    p.add_argument("--eps", type=float, nargs="+", default=[1e-2, 1e-3],
                   help="noise levels, decreasing")
    p.add_argument("--paths", type=int, default=paths_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None,
                   help="output directory for CSV + report.json")
    p.add_argument("--workers", type=int, default=1)


def _config_from_args(args, scenario, params=None, field=None, domain=None,
                      dt=None) -> ExperimentConfig:
    return ExperimentConfig(
        scenario=scenario,
        eps=args.eps,
        paths=args.paths,
        seed=args.seed,
        out=args.out,
        workers=args.workers,
        params=params or {},
        field=field,
        domain=domain,
        dt=dt or {"kind": "scaled", "c": 0.1},
    )


def _finish(report) -> int:
    ok = report.passed
    print(f"[{report.scenario}] {'PASS' if ok else 'FAIL'} "
          f"({report.runtime_s:.1f}s, {report.code_version})")
    for cell in report.cells:
        if cell.get("error"):
            print(f"  eps={cell['eps']:g}: ERROR {cell['error']}")
            continue
        for t in cell["tests"]:
            state = {True: "pass", False: "FAIL", None: "info"}[t["passed"]]
            pv = "" if t["p_value"] is None else f" p={t['p_value']:.3g}"
            print(f"  eps={cell['eps']:g} {t['name']}: {state} "
                  f"stat={t['statistic']:.4g}{pv}  {t['detail']}")
    return 0 if ok else 1


def _cmd_simulate(args) -> int:
    if args.config:
        cfg = ExperimentConfig.from_json(open(args.config).read())
        if args.out is not None:
            cfg.out = args.out
        if args.workers is not None:
            cfg.workers = args.workers
    else:
        if not (args.field and args.domain):
            raise SystemExit("simulate needs --config or both --field and --domain")
        cfg = _config_from_args(args, "simulate",
                                field=json.loads(args.field),
                                domain=json.loads(args.domain),
                                params=json.loads(args.params or "{}"))
    return _finish(run_experiment(cfg))


def _cmd_saddle_exit(args) -> int:
    params = {"lp": args.lp, "lm": args.lm, "delta": args.delta,
              "y2": args.y2, "dt": args.dt}
    if args.kappa is not None:
        params["kappa"] = args.kappa
    cfg = _config_from_args(args, "linear-saddle-exit", params=params,
                            dt={"kind": "absolute", "value": args.dt})
    return _finish(run_experiment(cfg))


def _cmd_levinson(args) -> int:
    params = {"alpha1": args.alpha1, "alpha2": args.alpha2}
    cfg = _config_from_args(args, "levinson-constant-drift", params=params)
    return _finish(run_experiment(cfg))


def _cmd_condition1d(args) -> int:
    scenario = json.loads(open(args.config).read())
    eps = scenario.pop("eps", args.eps)
    paths = scenario.pop("paths", args.paths)
    cfg = ExperimentConfig(scenario="condition1d", eps=eps, paths=paths,
                           seed=args.seed, out=args.out,
                           workers=args.workers, params=scenario)
    return _finish(run_experiment(cfg))


def _cmd_normalform(args) -> int:
    spec = json.loads(open(args.field).read())
    field = fields.field_from_config(spec)
    ratio = tuple(args.ratio) if args.ratio else None
    nf = normalform.normal_form_transform(field, R=args.order, ratio=ratio)
    text = nf.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    print(f"box: delta'={nf.delta_prime:g} delta={nf.delta:g} "
          f"truncation={nf.truncation_bound:.3g}")
    return 0


def _cmd_quasipotential(args) -> int:
    if args.field:
        field = fields.field_from_config(json.loads(args.field))
    else:
        field = fields.gradient_double_well()
    domain = None
    if args.domain:
        from .geometry import DomainSpec

        lo, hi = args.domain[:len(args.domain) // 2], args.domain[len(args.domain) // 2:]
        domain = DomainSpec.box(lo, hi)
    res = ldp.minimize_quasipotential(field, None, args.src, args.dst, domain,
                                      n_points=args.n_points,
                                      restarts=args.restarts, seed=args.seed)
    print(f"V = {res.V:.8g}  (T = {res.T:.4g}, converged = {res.converged})")
    if args.out:
        res.path.to_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_hetero(args) -> int:
    lp, lm, mup, mum = args.rates
    report = hetero.classify_two_node(lp, lm, mup, mum)
    print(f"case {report.case_id}: {report.condition}")
    print(f"  symmetry: {report.symmetry}")
    print(f"  p: {tuple(str(x) if x is not None else 'MC' for x in report.p)}"
          f"  {report.p_note}")
    print(f"  alpha0: branch1={report.alpha0_branch1:g} "
          f"branch23={report.alpha0_branch23:g}")
    for f in report.flags:
        print(f"  note: {f}")
    if args.classify_only:
        return 0
    params = {"lp": lp, "lm": lm, "mup": mup, "mum": mum, "mode": args.mode,
              "dt": args.dt}
    cfg = _config_from_args(args, "two-node", params=params)
    return _finish(run_experiment(cfg))


def _cmd_report(args) -> int:
    data = json.loads(open(args.infile).read())
    print(f"scenario: {data['scenario']}  (schema v{data['schema_version']}, "
          f"code {data['code_version']})")
    print(f"passed: {data['passed']}  runtime: {data['runtime_s']:.1f}s")
    for cell in data["cells"]:
        status = "ERROR" if cell.get("error") else \
            ("pass" if cell.get("passed") else "FAIL")
        print(f"  eps={cell['eps']:g}: {status}")
        for t in cell.get("tests", []):
            pv = "" if t["p_value"] is None else f" p={t['p_value']:.3g}"
            print(f"    {t['name']}: stat={t['statistic']:.4g}{pv} "
                  f"passed={t['passed']}")
    return 0 if data["passed"] else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="exitlab",
                                 description="small-noise exit-problem lab")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generic exit simulation")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--field", type=str, default=None, help="field JSON")
    p.add_argument("--domain", type=str, default=None, help="domain JSON")
    p.add_argument("--params", type=str, default=None)
    _add_common(p)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("saddle-exit", help="exact linear-saddle exit study")
    p.add_argument("--lp", type=float, default=1.0)
    p.add_argument("--lm", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--y2", type=float, default=0.25)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--kappa", type=float, default=None)
    _add_common(p, paths_default=10000)
    p.set_defaults(fn=_cmd_saddle_exit)

    p = sub.add_parser("levinson", help="transversal-exit correction study")
    p.add_argument("--alpha1", type=float, default=1.0)
    p.add_argument("--alpha2", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(fn=_cmd_levinson)

    p = sub.add_parser("condition1d", help="conditioned 1-d diffusion study")
    p.add_argument("--config", type=str, required=True,
                   help="scenario JSON: b, sigma, a1, a2, x0, eps, paths")
    _add_common(p)
    p.set_defaults(fn=_cmd_condition1d)

    p = sub.add_parser("normalform", help="normal-form transform of a field")
    p.add_argument("--field", type=str, required=True, help="field JSON file")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--ratio", type=int, nargs=2, default=None,
                   help="exact eigenvalue ratio p q")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_normalform)

    p = sub.add_parser("quasipotential", help="action minimization")
    p.add_argument("--field", type=str, default=None, help="field JSON")
    p.add_argument("--src", dest="src", type=float, nargs="+", required=True)
    p.add_argument("--dst", dest="dst", type=float, nargs="+", required=True)
    p.add_argument("--domain", type=float, nargs="+", default=None,
                   help="box bounds: lo... hi...")
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=_cmd_quasipotential)

    p = sub.add_parser("hetero", help="two-node network classification + MC")
    p.add_argument("--rates", type=float, nargs=4, required=True,
                   metavar=("LP", "LM", "MUP", "MUM"))
    p.add_argument("--mode", choices=("hybrid", "raw"), default="hybrid")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--classify-only", action="store_true")
    _add_common(p)
    p.set_defaults(fn=_cmd_hetero)

    p = sub.add_parser("report", help="pretty-print a saved report")
    p.add_argument("--in", dest="infile", type=str, required=True)
    p.set_defaults(fn=_cmd_report)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
