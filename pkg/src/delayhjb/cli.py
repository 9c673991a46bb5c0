"""Command line front end: ``delayhjb {check,solve,evaluate,simulate,verify,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 hypothesis failure (``check
--strict``), 4 numerical failure. JSON outputs are written with sorted keys
and carry a hash of the configuration plus version tags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import DelayHJBError, ValidationError
from .expr import ExpressionError, compile_expression

EXIT_OK, EXIT_CONFIG, EXIT_HYPOTHESIS, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing helpers


def _kv(text: str) -> dict:
    out = {}
    if not text:
        return out
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _grid_config(args, n: int):
    from .hjb import GridConfig

    opts = _kv(args.grid)
    quad = _kv(args.quad)
    known = {"nx", "nt", "ntheta", "bounds", "tol", "max_iter", "eta"}
    unknown = set(opts) - known
    if unknown:
        raise ConfigError(f"unknown --grid keys {sorted(unknown)}")
    if set(quad) - {"order"}:
        raise ConfigError(f"unknown --quad keys {sorted(set(quad) - {'order'})}")
    try:
        bounds = None
        if opts.get("bounds", "auto") != "auto":
            lo, hi = (float(v) for v in opts["bounds"].split(":"))
            bounds = tuple((lo, hi) for _ in range(n))
        return GridConfig(
            n_time=int(opts.get("nt", 32)), n_theta=int(opts.get("ntheta", 24)),
            gh_order=int(quad["order"]) if "order" in quad else None,
            n_space=int(opts["nx"]) if "nx" in opts else None, bounds=bounds,
            tol=float(opts.get("tol", 1e-9)), max_iter=int(opts.get("max_iter", 200)),
            eta=float(opts["eta"]) if "eta" in opts else None)
    except ValueError as exc:
        raise ConfigError(f"bad grid/quadrature override: {exc}") from None


def _load_spec(ref: str):
    from .demos import DEMOS
    from .model import load_spec

    if ref.startswith("demo:"):
        name = ref[5:]
        if name not in DEMOS:
            raise ConfigError(f"unknown demo {name!r}; choose from {sorted(DEMOS)}")
        return DEMOS[name](), {"demo": name}
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"spec file {ref} does not exist")
    return load_spec(path), json.loads(path.read_text())


def _history(entry, m):
    if entry is None:
        return None
    if "constant" in entry:
        return np.asarray(entry["constant"], dtype=float)
    if "expression" in entry:
        fn = compile_expression(entry["expression"], ("s",))

        def u0(times, fn=fn):
            vals = np.asarray(fn(s=np.asarray(times, dtype=float)), dtype=float)
            return np.broadcast_to(vals.reshape(len(times), -1), (len(times), m))

        return u0
    raise ConfigError("history must define 'constant' or 'expression'")


def _probe_states(spec, path):
    from .model import lift_initial

    if path is None:
        return [(0.0, lift_initial(spec), {"t": 0.0, "x0": spec.y0.tolist()})]
    try:
        items = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read probes: {exc}") from None
    out = []
    for item in items:
        y0 = item.get("x0", spec.y0.tolist())
        u0 = _history(item.get("history"), spec.m)
        local = spec.replace(y0=y0, u0=u0 if u0 is not None else spec.u0)
        out.append((float(item.get("t", 0.0)), lift_initial(local), item))
    return out


def _policy(text, spec, fld):
    from .simulate import PolicyHandle

    if text == "feedback":
        if fld is None:
            raise ConfigError("feedback policy needs a solved field")
        return PolicyHandle.feedback(fld)
    if text.startswith("constant:"):
        return PolicyHandle.constant([float(v) for v in text[9:].split(";")])
    if text.startswith("random"):
        return PolicyHandle.random_open_loop(spec, seed=0)
    raise ConfigError(f"unknown policy {text!r}")


# --------------------------------------------------------------------------
# output


def _stamp(args, raw_spec) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    blob = json.dumps({"args": cfg, "spec": raw_spec}, sort_keys=True, default=str)
    return {
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "versions": {"delayhjb": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _emit(args, name: str, payload: dict, raw_spec) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload.update(_stamp(args, raw_spec))
    path = out / f"{name}.json"
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
    print(path)
    return path


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")
    print(path)


# --------------------------------------------------------------------------
# commands


def cmd_check(args):
    from .model import check_hypotheses

    spec, raw = _load_spec(args.spec)
    report = check_hypotheses(spec, seed=args.seed)
    _emit(args, "check", {"report": report.to_dict()}, raw)
    if args.strict and not report.ok:
        return EXIT_HYPOTHESIS
    return EXIT_OK


def _solve_or_load(args, spec):
    from .hjb import ReducedValueField, picard_solve

    if getattr(args, "field", None):
        return ReducedValueField.load(args.field, spec), None
    return picard_solve(spec, _grid_config(args, spec.n))


def cmd_solve(args):
    spec, raw = _load_spec(args.spec)
    if args.field:
        raise ConfigError("solve does not take --field")
    fld, report = _solve_or_load(args, spec)
    head, body = fld.export(Path(args.out) / "field")
    print(head)
    print(body)
    rep = report.to_dict()
    rep.pop("elapsed", None)
    _emit(args, "solve_report", {"report": rep}, raw)
    return EXIT_OK


def cmd_evaluate(args):
    from .hjb import evaluate_v, grad_B_v

    spec, raw = _load_spec(args.spec)
    fld, _ = _solve_or_load(args, spec)
    rows = []
    for t, x, item in _probe_states(spec, args.probes):
        v = evaluate_v(t, x, fld, running=args.running)
        g = grad_B_v(t, x, fld, running=args.running).tolist() if t < spec.T else None
        rows.append({"probe": item, "v": v, "grad_B_v": g})
    _emit(args, "evaluate", {"probes": rows, "running": args.running}, raw)
    return EXIT_OK


def cmd_simulate(args):
    from .simulate import integrate

    spec, raw = _load_spec(args.spec)
    fld = None
    if args.policy == "feedback":
        fld, _ = _solve_or_load(args, spec)
    batch = integrate(spec, _policy(args.policy, spec, fld), args.dt, args.paths, args.seed,
                      record=args.record)
    _emit(args, "simulate", {"summary": batch.summary()}, raw)
    if args.record:
        print(batch.export_csv(Path(args.out) / "trajectories.csv", thin=args.thin))
    if args.format == "csv":
        _write_csv(Path(args.out) / "path_costs.csv", ["running", "control", "terminal", "J"],
                   np.column_stack([batch.running_cost, batch.control_cost,
                                    batch.terminal_cost, batch.J]))
    return EXIT_OK


def cmd_verify(args):
    from .model import lift_initial
    from .simulate import PolicyHandle, compare_policies, fundamental_identity_residual
    from .hjb import evaluate_v

    spec, raw = _load_spec(args.spec)
    fld, report = _solve_or_load(args, spec)
    v = evaluate_v(0.0, lift_initial(spec), fld)
    policies = {"feedback": PolicyHandle.feedback(fld),
                "zero": PolicyHandle.constant(np.zeros(spec.m), name="zero"),
                "random_open_loop": PolicyHandle.random_open_loop(spec, seed=args.seed)}
    identity = {}
    for name, pol in policies.items():
        res = fundamental_identity_residual(spec, fld, pol, args.dt, args.paths, args.seed, v=v)
        d = res.to_dict()
        d["within_3se"] = abs(res.residual) <= 3 * res.residual_se
        identity[name] = d
    candidates = {"feedback": policies["feedback"]}
    if spec.U.kind == "box" and spec.m == 1 and spec.U.compact:
        for u in np.linspace(spec.U.lo[0], spec.U.hi[0], args.sweep_points):
            candidates[f"constant_{u:+.3f}"] = PolicyHandle.constant([u], name=f"constant_{u:+.3f}")
    else:
        candidates["zero"] = policies["zero"]
    table = compare_policies(spec, fld, candidates, args.dt, args.paths, args.seed, v=v)
    payload = {"v": v, "identity": identity, "comparison": table.to_dict(),
               "feedback_ranked_first": table.best().name == "feedback",
               "feedback_dominates": table.feedback_dominates()}
    _emit(args, "verify", payload, raw)
    return EXIT_OK


def cmd_sweep(args):
    from .gaussian import compute_Q0, inverse_sqrt_norm, whitened_control_matrix
    from .operators import etAB_0

    spec, raw = _load_spec(args.spec)
    ts = np.geomspace(args.t_min, args.t_max, args.points)
    inv = inverse_sqrt_norm(ts, spec.a0, spec.sigma)
    bnorm = []
    for t in ts:
        ker = compute_Q0(t, spec)
        cw = whitened_control_matrix(t, spec, ker, etAB_0(t, spec))
        bnorm.append(float(np.linalg.norm(cw, 2)) if cw.size else 0.0)
    rows = np.column_stack([ts, inv, bnorm])
    header = ["t", "inv_sqrt_Q_norm", "inv_sqrt_Q_etAB_norm"]
    if args.format == "csv":
        _write_csv(Path(args.out) / "sweep.csv", header, rows)
    _emit(args, "sweep", {"columns": header, "rows": rows.tolist()}, raw)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delayhjb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solve=False):
        p.add_argument("--spec", required=True, help="JSON spec file or demo:NAME")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=["csv", "json"], default="json")
        if solve:
            p.add_argument("--grid", default="", help="nx=..,nt=..,ntheta=..,bounds=auto|lo:hi,tol=..")
            p.add_argument("--quad", default="", help="order=..")
            p.add_argument("--field", default=None, help="load a solved field (path stem)")

    p = sub.add_parser("check", help="audit the standing hypotheses")
    common(p)
    p.add_argument("--strict", action="store_true", help="exit 3 when a hypothesis fails")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("solve", help="solve the HJB equation and export the field")
    common(p, solve=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="evaluate v and grad_B v at probe states")
    common(p, solve=True)
    p.add_argument("--probes", default=None, help="JSON list of {t, x0, history}")
    p.add_argument("--running", choices=["pullback", "exact"], default="pullback")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="simulate the controlled delay SDE")
    common(p, solve=True)
    p.add_argument("--policy", default="feedback", help="feedback | constant:U | random")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--record", action="store_true")
    p.add_argument("--thin", type=int, default=10)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="fundamental identity and policy comparison")
    common(p, solve=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--sweep-points", type=int, default=21)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="blow-up rates of the smoothing kernels")
    common(p)
    p.add_argument("--t-min", type=float, default=1e-3)
    p.add_argument("--t-max", type=float, default=1e-1)
    p.add_argument("--points", type=int, default=20)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValidationError, ExpressionError) as exc:
        print(json.dumps({"error": "config", "module": getattr(exc, "module", "cli"),
                          "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except DelayHJBError as exc:
        print(json.dumps({"error": "numeric", "module": exc.module, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
