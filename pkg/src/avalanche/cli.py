"""``avalanche`` command line: sampling, exact verification and experiments.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime error,
3 a statistical or exact check failed (verify, or any command with --check).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .allowed import (
    EnumerationTooLarge,
    NotATree,
    SpanningTree,
    allowed_array,
    config_to_tree,
    tree_counts,
    tree_to_config,
)
from .analysis import (
    covariance_decay,
    dhar_exact,
    dhar_statistics,
    green_exact,
    green_infinite,
    max_height_kernel,
    max_height_probability,
    max_height_probability_exact,
    rational_form,
    tv_distance_exact,
)
from .config import ExperimentConfig, load_config
from .dynamics import RateProfile, gamma_limit_experiment, stationarity_test
from .engine import DiscreteConfig
from .lattice import toppling_matrix
from .sampler import RngStream, sample_m_batch, sample_nu_batch, sample_tree_labels

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
VERIFY_MAX_SITES = 10


# -- argument parsing -----------------------------------------------------


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # subcommands re-declare the flags with suppressed defaults so values given
    # before the subcommand name are not reset
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="JSON experiment config; flags override its values")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker threads (default: $AVALANCHE_THREADS or all CPUs)")
    g.add_argument("--out", help="output directory; primary output goes to stdout if omitted")
    g.add_argument("--format", choices=("csv", "json"))
    g.add_argument("--check", action="store_true", help="exit 3 if the statistical test fails")
    m = p.add_argument_group("model")
    m.add_argument("--d", type=int)
    m.add_argument("--radius", type=int)
    m.add_argument("--shape", type=int, nargs="+", help="box [0,s1) x ... x [0,sd) instead of a centred box")
    m.add_argument("--gamma", type=float)
    m.add_argument("--gamma-list", type=float, nargs="+")
    s = p.add_argument_group("sampling")
    s.add_argument("--samples", type=int)
    s.add_argument("--streams", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avalanche", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(suppress=True)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("sample", parents=[common], help="draw stationary configurations")
    p.add_argument("--kind", choices=("nu", "m", "tree"), help="discrete heights, continuous heights or trees")

    p = sub.add_parser("verify", parents=[common], help="exact enumeration checks on a small box")
    p.add_argument("--tree", help="JSON spanning tree to round-trip through the bijection")

    p = sub.add_parser("greens", parents=[common], help="Green's function table or series")
    p.add_argument("--series", type=int, metavar="R", help="compare the Z^d series with the box solve at r = 0..R")

    sub.add_parser("dhar", parents=[common], help="Monte Carlo check of mean toppling numbers")

    p = sub.add_parser("covariance", parents=[common], help="maximal-height covariance decay fits")
    p.add_argument("--distances", type=int, nargs="+")
    p.add_argument("--batches", type=int)

    p = sub.add_parser("dynamics", parents=[common], help="stationarity of the addition process")
    p.add_argument("--t-max", type=float)
    p.add_argument("--burn-in", type=float)
    p.add_argument("--rates", choices=("constant", "exponential", "power"))

    p = sub.add_parser("limit", parents=[common], help="zero-dissipation limit experiment")
    p.add_argument("--t-max", type=float)
    p.add_argument("--fixed-configs", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out = {
        "model": {"d": get("d"), "radius": get("radius"), "shape": get("shape"), "gamma": get("gamma"), "gamma_list": get("gamma_list")},
        "sampler": {"seed": get("seed"), "samples": get("samples"), "streams": get("streams"), "kind": get("kind")},
        "dynamics": {"t_max": get("t_max"), "burn_in": get("burn_in"), "rates": get("rates")},
        "analysis": {"distances": get("distances"), "batches": get("batches"), "fixed_configs": get("fixed_configs")},
        "output": {"dir": get("out"), "formats": [args.format] if get("format") else None},
    }
    return out


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        if flag < 1:
            raise ValueError("--threads must be at least 1")
        return flag
    env = os.environ.get("AVALANCHE_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"AVALANCHE_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise ValueError("AVALANCHE_THREADS must be at least 1")
        return value
    return os.cpu_count() or 1


# -- output ---------------------------------------------------------------


def metadata(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.sampler.seed,
        "version": __version__,
        "config": cfg.model_dump(mode="json"),
    }


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit(cfg: ExperimentConfig, command: str, outputs: dict[str, str]) -> None:
    """Write ``{extension: text}``; stdout gets the selected format if no directory is set."""
    fmt = cfg.output.formats[0]
    if cfg.output.dir is None:
        sys.stdout.write(outputs.get(fmt) or next(iter(outputs.values())))
        return
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    for ext, text in outputs.items():
        if ext in cfg.output.formats or len(outputs) == 1:
            (out / f"{command}.{ext}").write_text(text, encoding="utf-8", newline="\n")
    meta = json.dumps(metadata(cfg, command), indent=2, sort_keys=True) + "\n"
    (out / f"{command}.meta.json").write_text(meta, encoding="utf-8", newline="\n")


def _site_labels(spec) -> list[str]:
    return [" ".join(map(str, s)) for s in spec.sites]


def _f(v: float | None) -> str:
    return "" if v is None else repr(float(v))


# -- commands -------------------------------------------------------------


def _split(total: int, parts: int) -> list[int]:
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def cmd_sample(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    sc = cfg.sampler
    draw = {"nu": sample_nu_batch, "m": sample_m_batch, "tree": sample_tree_labels}[sc.kind]
    streams = RngStream(sc.seed).spawn(sc.streams)
    sizes = _split(sc.samples, sc.streams)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        batches = list(pool.map(lambda a: draw(spec, a[0], a[1]), zip(sizes, streams)))
    rows = [(i, r) for i, batch in enumerate(batches) for r in batch]
    fmt_val = (lambda v: repr(float(v))) if sc.kind == "m" else (lambda v: str(int(v)))
    text_csv = _csv(["stream", *_site_labels(spec)], ([i, *map(fmt_val, r)] for i, r in rows))
    lines = [json.dumps({"stream": i, "values": [float(v) if sc.kind == "m" else int(v) for v in r]}) for i, r in rows]
    emit(cfg, "sample", {"csv": text_csv, "json": "\n".join(lines) + ("\n" if lines else "")})
    return EXIT_OK


def verify_checks(spec, tree_json: str | None = None) -> tuple[list[dict], dict]:
    """Exact checks on a small spec; returns per-check results and headline values."""
    checks = []
    gamma = spec.gamma
    det = toppling_matrix(spec).det()
    counts = tree_counts(spec)
    tree_weight = float(sum(c * gamma**j for j, c in enumerate(counts)))
    rows = allowed_array(spec)
    nmax = np.count_nonzero(rows == spec.n_dirs, axis=1)
    allowed_weight = float(np.sum(np.power(gamma, nmax.astype(float))))
    rel = max(abs(tree_weight - det), abs(allowed_weight - det)) / max(abs(det), 1e-300)
    checks.append({"name": "matrix_tree", "passed": bool(rel <= 1e-9),
                   "detail": {"det": det, "tree_weight": tree_weight, "allowed_weight": allowed_weight, "rel_err": rel}})

    images, ok = set(), True
    for r in rows:
        tree = config_to_tree(DiscreteConfig(spec, r))
        images.add(tree.labels)
        ok &= np.array_equal(tree_to_config(tree).values, r)
    n_trees = int(counts.sum())
    ok &= len(images) == len(rows) == n_trees
    detail = {"allowed": int(len(rows)), "trees": n_trees, "distinct_images": len(images)}
    if tree_json is not None:
        try:
            tree = SpanningTree.from_json(spec, tree_json)
            back = config_to_tree(tree_to_config(tree))
            tree_ok = back == tree
        except (NotATree, ValueError, KeyError, TypeError) as exc:
            tree_ok = False
            detail["tree_error"] = str(exc)
        detail["input_tree_roundtrip"] = bool(tree_ok)
        ok &= tree_ok
    checks.append({"name": "bijection", "passed": bool(ok), "detail": detail})

    form = rational_form(gamma)
    if form is not None and (gamma > 0 or np.any(spec.boundary_counts)):
        try:
            err = float(np.max(np.abs(dhar_exact(spec) - green_exact(spec).values)))
            checks.append({"name": "dhar_exact", "passed": err <= 1e-9, "detail": {"max_abs_err": err, "n": form[0], "k": form[1]}})
        except EnumerationTooLarge as exc:
            checks.append({"name": "dhar_exact", "passed": True, "skipped": str(exc)})
    else:
        checks.append({"name": "dhar_exact", "passed": True, "skipped": "gamma has no small rational form"})

    if gamma > 0:
        kernel = max_height_kernel(spec)
        worst = 0.0
        for size in range(1, spec.n_sites + 1):
            for sub in itertools.combinations(range(spec.n_sites), size):
                worst = max(worst, abs(max_height_probability(kernel, sub) - max_height_probability_exact(spec, sub)))
        checks.append({"name": "determinantal", "passed": worst <= 1e-9, "detail": {"max_abs_err": worst}})
    else:
        checks.append({"name": "determinantal", "passed": True, "skipped": "needs gamma > 0"})

    tv = tv_distance_exact(spec, gamma, 0.0)
    ladder = [gamma, gamma / 10, gamma / 100] if gamma > 0 else []
    tvs = [tv_distance_exact(spec, g, 0.0) for g in ladder]
    tv_ok = tv_distance_exact(spec, gamma, gamma) == 0.0 and all(b < a for a, b in zip(tvs, tvs[1:]))
    checks.append({"name": "tv_limit", "passed": bool(tv_ok), "detail": {"tv_to_zero": tv, "ladder": dict(zip(map(str, ladder), tvs))}})
    return checks, {"det": det, "trees": n_trees, "tv_to_zero": tv}


def cmd_verify(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    if spec.n_sites > VERIFY_MAX_SITES:
        raise EnumerationTooLarge((spec.n_dirs + 1) ** spec.n_sites, (spec.n_dirs + 1) ** VERIFY_MAX_SITES)
    tree_json = Path(args.tree).read_text(encoding="utf-8") if getattr(args, "tree", None) else None
    checks, headline = verify_checks(spec, tree_json)
    report = {"spec": spec.to_dict(), **headline, "checks": checks}
    text_csv = _csv(["check", "passed", "detail"],
                    ([c["name"], str(c["passed"]).lower(), json.dumps(c.get("detail", c.get("skipped")), sort_keys=True)]
                     for c in checks))
    emit(cfg, "verify", {"json": json.dumps(report, indent=2, sort_keys=True) + "\n", "csv": text_csv})
    for c in checks:
        status = "skip" if "skipped" in c else ("pass" if c["passed"] else "FAIL")
        print(f"{status:4s} {c['name']}", file=sys.stderr)
    print(f"det={headline['det']:.12g} trees={headline['trees']} tv(gamma,0)={headline['tv_to_zero']:.12g}", file=sys.stderr)
    return EXIT_OK if all(c["passed"] for c in checks) else EXIT_CHECK


def cmd_greens(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    table = green_exact(spec)
    if getattr(args, "series", None) is not None:
        origin = spec.site_index(spec.sites[0] if cfg.model.shape else (0,) * spec.d)
        rows = []
        for r in range(args.series + 1):
            x = (r,) + (0,) * (spec.d - 1)
            box = table.values[origin, spec.site_index(x)] if x in spec.index else None
            rows.append((r, green_infinite(spec.d, spec.gamma, x), box))
        text_csv = _csv(["r", "series", "box"], ((r, _f(s), _f(b)) for r, s, b in rows))
        text_json = json.dumps([{"r": r, "series": s, "box": b} for r, s, b in rows]) + "\n"
    else:
        text_csv = table.to_csv()
        text_json = json.dumps({"sites": [list(s) for s in spec.sites], "values": table.values.tolist()}) + "\n"
    emit(cfg, "greens", {"csv": text_csv, "json": text_json})
    return EXIT_OK


def cmd_dhar(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    est = dhar_statistics(spec, cfg.sampler.samples, RngStream(cfg.sampler.seed))
    labels = _site_labels(spec)
    header = ["x", "y", "estimate", "stderr", "exact", "z", "p_topple", "within_3se"]
    rows = [(labels[e.x], labels[e.y], _f(e.estimate), _f(e.stderr), _f(e.exact), _f(e.z), _f(e.p_topple),
             str(e.within()).lower()) for e in est]
    emit(cfg, "dhar", {"csv": _csv(header, rows), "json": json.dumps([e.__dict__ for e in est]) + "\n"})
    failed = sum(not e.within() for e in est)
    print(f"{len(est) - failed}/{len(est)} pairs within 3 standard errors", file=sys.stderr)
    return EXIT_CHECK if args.check and failed else EXIT_OK


def cmd_covariance(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    gammas = cfg.model.gamma_list or [cfg.model.gamma]
    dist = {g: cfg.analysis.distances for g in gammas} if cfg.analysis.distances else None
    fits = covariance_decay(spec, gammas, cfg.sampler.samples, RngStream(cfg.sampler.seed), dist,
                            batches=cfg.analysis.batches, threads=threads)
    ratio = None
    if len(fits) == 2 and all(f.rate for f in fits):
        lo, hi = sorted(fits, key=lambda f: f.gamma)
        ratio = hi.rate / lo.rate
    rows = [(f.gamma, p.r, _f(p.cov), _f(p.se), _f(p.exact), p.pairs) for f in fits for p in f.points]
    report = {"fits": [f.to_dict() for f in fits], "rate_ratio": ratio}
    emit(cfg, "covariance", {"csv": _csv(["gamma", "r", "cov", "se", "exact", "pairs"], rows),
                             "json": json.dumps(report, indent=2) + "\n"})
    for f in fits:
        print(f"gamma={f.gamma}: rate={f.rate} ({f.diagnostic})", file=sys.stderr)
    if args.check and (ratio is None or not 1.6 <= ratio <= 2.4):
        return EXIT_CHECK
    return EXIT_OK


def _rates(cfg: ExperimentConfig, spec) -> RateProfile:
    dc = cfg.dynamics
    if dc.rates == "constant":
        return RateProfile.constant(spec, dc.rate)
    return RateProfile.decaying(spec, dc.rate, dc.scale, dc.rates)


def cmd_dynamics(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    rep = stationarity_test(spec, _rates(cfg, spec), cfg.dynamics.burn_in, cfg.dynamics.t_max,
                            cfg.sampler.samples, RngStream(cfg.sampler.seed))
    labels = _site_labels(spec)
    rows = [(labels[i], _f(p), _f(k)) for i, (p, k) in enumerate(zip(rep.p_values, rep.ks_p_values))]
    emit(cfg, "dynamics", {"csv": _csv(["site", "p_chi2", "p_ks"], rows),
                           "json": json.dumps(rep.to_dict(), indent=2) + "\n"})
    print(f"stationarity {'pass' if rep.passed else 'FAIL'}: min p = {min(rep.p_values):.4g}", file=sys.stderr)
    return EXIT_CHECK if args.check and not rep.passed else EXIT_OK


def cmd_limit(cfg: ExperimentConfig, args, threads: int) -> int:
    spec = cfg.model.spec()
    gammas = [g for g in (cfg.model.gamma_list or [1.0, 0.1, 0.01]) if g > 0]
    rep = gamma_limit_experiment(spec, gammas, _rates(cfg, spec), cfg.sampler.samples, RngStream(cfg.sampler.seed),
                                 fixed_configs=cfg.analysis.fixed_configs, t_max=cfg.dynamics.t_max)
    exact = rep.tv_height_exact or [None] * len(rep.gammas)
    rows = [(g, _f(a), _f(e), _f(b), _f(c), _f(d)) for g, a, e, b, c, d in
            zip(rep.gammas, rep.tv_height_mc, exact, rep.tv_avalanche_mc, rep.height_differs, rep.count_differs)]
    header = ["gamma", "tv_height_mc", "tv_height_exact", "tv_avalanche_mc", "height_differs", "count_differs"]
    emit(cfg, "limit", {"csv": _csv(header, rows), "json": json.dumps(rep.to_dict(), indent=2) + "\n"})
    print(f"monotone={rep.height_monotone} nested={rep.nested}", file=sys.stderr)
    ok = rep.height_monotone and rep.nested and rep.counts_monotone
    return EXIT_CHECK if args.check and not ok else EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "verify": cmd_verify,
    "greens": cmd_greens,
    "dhar": cmd_dhar,
    "covariance": cmd_covariance,
    "dynamics": cmd_dynamics,
    "limit": cmd_limit,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        threads = resolve_threads(args.threads)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](cfg, args, threads)
    except EnumerationTooLarge as exc:
        print(f"{exc}; use a smaller box (verify supports up to {VERIFY_MAX_SITES} sites)", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, NotATree) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level runtime guard
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
