"""Command-line interface: configuration in, documents and CSV out.

Subcommands
-----------
run          full pipeline: diagonalise, build noise, propagate, average, write
equilibrate  imaginary-time phase only; prints the mean initial density
verify-noise Monte Carlo check of every noise correlation block
kernels      dump kernel tables to CSV for plotting
oracle       exact reduced dynamics of the truncated total system, as CSV
compare      diff two result CSVs (ensemble vs oracle) in stderr units

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 comparison failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import ensemble as ens
from .config import RunConfig, emit_config, load_config
from .errors import ConfigError, EslnError, NumericalError, ValidationError
from .kernels import KernelContext, l_matrix
from .model import diagonalize_bath, mode_couplings
from .noise import build_covariance, factorize, hs_identity_check, verify_empirical
from .oracle import TruncatedBath, exact_reduced_dynamics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_COMPARISON = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esln",
                                description="Stochastic open-system dynamics from "
                                            "equilibrated initial conditions")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override ensemble.master_seed")

    run = sub.add_parser("run", help="full two-time Monte Carlo pipeline")
    add_config(run)
    run.add_argument("--n-traj", type=int, default=None, help="override ensemble.n_traj")
    run.add_argument("--workers", type=int, default=1,
                     help="worker threads (never affects results)")
    run.add_argument("--output", default=None, help="output document path")
    run.add_argument("--csv", default=None, help="output CSV path")
    run.add_argument("--checkpoint", default=None,
                     help="checkpoint file (resumed when present)")

    eq = sub.add_parser("equilibrate", help="imaginary-time phase only")
    add_config(eq)
    eq.add_argument("--n-traj", type=int, default=None)
    eq.add_argument("--workers", type=int, default=1)

    vn = sub.add_parser("verify-noise", help="empirical covariance z-score report")
    add_config(vn)
    vn.add_argument("--samples", type=int, default=100_000)
    vn.add_argument("--hs-vectors", type=int, default=0,
                    help="also check this many random characteristic-function vectors")
    vn.add_argument("--csv", default=None,
                    help="dump empirical vs target blocks to CSV")

    ker = sub.add_parser("kernels", help="dump kernel tables to CSV")
    add_config(ker)
    ker.add_argument("--output", default=None, help="CSV path (default stdout)")

    orc = sub.add_parser("oracle", help="exact reduced dynamics (truncated bath)")
    add_config(orc)
    orc.add_argument("--csv", default=None, help="CSV path (default from config)")
    orc.add_argument("--n-levels", type=int, default=None, help="override oracle.n_levels")

    cmp_ = sub.add_parser("compare", help="diff two result CSVs in stderr units")
    cmp_.add_argument("series_a")
    cmp_.add_argument("series_b")
    cmp_.add_argument("--threshold", type=float, default=5.0)
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ValidationError("--seed", "must be >= 0")
        cfg = cfg.with_overrides(master_seed=args.seed)
    if getattr(args, "n_traj", None) is not None and args.n_traj < 2:
        raise ValidationError("--n-traj", "must be >= 2")
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    result = ens.run_ensemble(cfg, n_traj=args.n_traj, workers=args.workers,
                              checkpoint_path=args.checkpoint)
    out_doc = args.output or cfg.output_document
    out_csv = args.csv or cfg.output_csv
    if out_doc:
        ens.write_document(result, out_doc)
        print(f"wrote {out_doc}")
    if out_csv:
        ens.write_csv(result, out_csv)
        print(f"wrote {out_csv}")
    report = ens.hermiticity_trace_report(result)
    for line in report.lines():
        print(line)
    print(f"n_ok = {result.n_ok}, n_failed = {result.n_failed}, "
          f"worst stderr = {result.stderr_rho.max():.3e}")
    if not out_doc and not out_csv:
        sys.stdout.write(ens.document_bytes(ens.result_document(result)).decode())
    return EXIT_OK


def _cmd_equilibrate(args) -> int:
    cfg = _load(args)
    result = ens.run_equilibration(cfg, n_traj=args.n_traj, workers=args.workers)
    doc = {
        "schema": "esln-equilibrate/1",
        "n_ok": result.n_ok,
        "n_failed": result.n_failed,
        "mean_rho0": [[[float(v.real), float(v.imag)] for v in row]
                      for row in result.mean_rho0],
        "stderr_re": [[float(v) for v in row] for row in result.se_re[0]],
        "stderr_im": [[float(v) for v in row] for row in result.se_im[0]],
        "z_factor": {"mean_re": result.z_factor_mean.real,
                     "mean_im": result.z_factor_mean.imag,
                     "se": result.z_factor_se},
    }
    print(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    return EXIT_OK


def _cmd_verify_noise(args) -> int:
    cfg = _load(args)
    modes = diagonalize_bath(cfg.bath)
    ctx = KernelContext.from_bath(cfg.bath, modes, cfg.system.hbar, cfg.system.beta)
    cov = build_covariance(ctx, cfg.grids, cross_kernel=cfg.cross_kernel,
                           dim_cap=cfg.dim_cap)
    factor = factorize(cov, method=cfg.factorization)
    report = verify_empirical(factor, cov, args.samples, seed=cfg.master_seed)
    for line in report.lines():
        print(line)
    ok = report.passed
    if args.hs_vectors > 0:
        checks = hs_identity_check(cov, factor, n_vectors=args.hs_vectors,
                                   n_samples=args.samples, seed=cfg.master_seed,
                                   hbar=cfg.system.hbar)
        for i, chk in enumerate(checks):
            mark = "ok" if chk.z < 5.0 else "FAIL"
            print(f"  characteristic function vector {i}: |z| = {chk.z:.3f}   {mark}")
            ok = ok and chk.z < 5.0
    if args.csv:
        pairs = [("eta", "eta"), ("eta", "nu"), ("eta", "mu"),
                 ("nu", "nu"), ("nu", "mu"), ("mu", "mu")]
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("block,row,col,target_re,target_im,empirical_re,empirical_im,z\n")
            for fa, fb in pairs:
                sa, sb = cov.field_slice(fa), cov.field_slice(fb)
                tgt = cov.sigma[sa, sb]
                emp = report.empirical[sa, sb]
                zs = report.z[sa, sb]
                for r in range(tgt.shape[0]):
                    for c in range(tgt.shape[1]):
                        fh.write(f"{fa}-{fb},{r},{c},{tgt[r, c].real!r},"
                                 f"{tgt[r, c].imag!r},{emp[r, c].real!r},"
                                 f"{emp[r, c].imag!r},{zs[r, c]!r}\n")
        print(f"wrote {args.csv}")
    if not ok:
        print("verify-noise FAILED")
        return EXIT_COMPARISON
    return EXIT_OK


def _cmd_kernels(args) -> int:
    cfg = _load(args)
    modes = diagonalize_bath(cfg.bath)
    ctx = KernelContext.from_bath(cfg.bath, modes, cfg.system.hbar, cfg.system.beta)
    t = cfg.grids.t
    tau = cfg.grids.tau
    m = modes.n_modes
    l_r = np.stack([l_matrix(ctx, "R", t=tk) for tk in t]) if m else np.zeros((t.size, 0, 0))
    l_i = np.stack([l_matrix(ctx, "I", t=tk) for tk in t]) if m else l_r
    l_e = np.stack([l_matrix(ctx, "e", tau=tk) for tk in tau]) if m else \
        np.zeros((tau.size, 0, 0))
    l_o = np.stack([l_matrix(ctx, "o", tau=tk) for tk in tau]) if m else l_e
    lines = ["i,j,t,l_r,l_i,tau,l_e,l_o"]
    n_rows = max(t.size, tau.size)
    for i in range(m):
        for j in range(m):
            for k in range(n_rows):
                t_part = (f"{float(t[k])!r},{float(l_r[k, i, j])!r},"
                          f"{float(l_i[k, i, j])!r}") if k < t.size else ",,"
                tau_part = (f"{float(tau[k])!r},{float(l_e[k, i, j])!r},"
                            f"{float(l_o[k, i, j])!r}") if k < tau.size else ",,"
                lines.append(f"{i},{j},{t_part},{tau_part}")
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = _load(args)
    modes = diagonalize_bath(cfg.bath)
    g_ops = mode_couplings(modes, cfg.bath, cfg.system)
    n_levels = args.n_levels if args.n_levels is not None else cfg.oracle_n_levels
    trunc = TruncatedBath(n_levels=n_levels, cap=cfg.oracle_cap)
    series = exact_reduced_dynamics(cfg.system, modes, g_ops, trunc, cfg.grids)
    zeros = np.zeros_like(series, dtype=float)
    path = args.csv or cfg.output_csv
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in ens.csv_lines(cfg.grids.t, series, zeros, zeros):
                fh.write(line + "\n")
        print(f"wrote {path}")
    else:
        for line in ens.csv_lines(cfg.grids.t, series, zeros, zeros):
            print(line)
    return EXIT_OK


def _cmd_compare(args) -> int:
    max_z, _ = ens.compare_series(args.series_a, args.series_b)
    print(f"max z-score = {max_z:.3f} (threshold {args.threshold:g})")
    if max_z >= args.threshold:
        print("COMPARISON FAILED")
        return EXIT_COMPARISON
    print("PASS")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "equilibrate": _cmd_equilibrate,
    "verify-noise": _cmd_verify_noise,
    "kernels": _cmd_kernels,
    "oracle": _cmd_oracle,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EslnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
