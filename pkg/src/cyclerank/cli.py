"""``cyclerank`` command-line interface.

Exit codes: 0 success, 2 invalid arguments or configuration, 3 I/O or
input-format error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .io import FormatError, read_tensor, write_matrix, write_tensor
from .pcfg import Grammar, GrammarError, inside, marginals, outside
from .pipeline import PipelineConfig, approx_cp_rank, approx_cycle_rank
from .sketch import contract_all_modes, countsketch_new, make_rng, sketch_columns
from .solver import SolverOptions
from .tensor import (
    AccumulationCounter,
    CycleFactors,
    SparseTensor3,
    cp_reconstruct,
    cycle_reconstruct,
    flatten,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("cyclerank")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(command, args, outdir, outputs, config=None, inputs=()):
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
    }
    _dump_json(manifest, Path(outdir) / "manifest.json")


def _load_tensor(path):
    try:
        return read_tensor(path)
    except FileNotFoundError:
        raise CliError(f"cannot read {path}: no such file", EXIT_IO) from None
    except FormatError as exc:
        raise CliError(f"malformed tensor file {exc}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _pipeline_config(args):
    try:
        solver = SolverOptions(max_sweeps=args.max_sweeps, starts=args.starts, tol_rel=args.tol)
        return PipelineConfig(k=args.k, eps=args.eps, c_s=args.cs, c_t=args.ct,
                              restarts=args.restarts, seed=args.seed, solver=solver,
                              sketch=args.sketch, threads=args.threads,
                              dense_check=args.dense_check)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _outdir(args):
    out = Path(args.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from None
    return out


def _run_approx(args, kind):
    cfg = _pipeline_config(args)
    A = _load_tensor(args.input)
    out = _outdir(args)
    if kind == "cycle":
        F, report = approx_cycle_rank(A, cfg)
        factors = (F.U, F.V, F.W)
    else:
        factors, report = approx_cp_rank(A, cfg)
    paths = []
    for name, M in zip("UVW", factors):
        p = out / f"{name}.txt"
        write_matrix(M, p)
        paths.append(p)
    rep = report.to_json(include_timings=False)
    rep["input"] = str(args.input)
    _dump_json(rep, out / "report.json")
    _dump_json(report.timings, out / "timings.json")
    paths.append(out / "report.json")
    _write_manifest(args.command, args, out, paths, cfg.to_json(), inputs=[args.input])
    print(f"residual_sq={report.residual_sq!r} relative={report.relative_residual!r}")
    return EXIT_OK


def cmd_approx_cycle(args):
    return _run_approx(args, "cycle")


def cmd_approx_cp(args):
    return _run_approx(args, "cp")


def cmd_gen(args):
    if args.n < 1 or args.k < 1:
        raise CliError("gen needs n >= 1 and k >= 1", EXIT_CONFIG)
    if args.noise < 0 or not 0 < args.density <= 1:
        raise CliError("gen needs noise >= 0 and density in (0, 1]", EXIT_CONFIG)
    rng = make_rng(args.seed)
    n, k = args.n, args.k
    width = k * k if args.kind == "cycle" else k
    facs = []
    for _ in range(3):
        M = rng.standard_normal((n, width))
        if args.density < 1:
            M *= rng.random((n, 1)) < args.density
        facs.append(M)
    if args.kind == "cycle":
        A0 = cycle_reconstruct(CycleFactors(*facs, k))
    else:
        A0 = cp_reconstruct(*facs)
    norm0 = float(np.linalg.norm(A0))
    noise_sq = 0.0
    A = A0
    if args.noise > 0 and norm0 > 0:
        N = rng.standard_normal(A0.shape)
        N *= args.noise * norm0 / np.linalg.norm(N)
        A = A0 + N
        noise_sq = float(np.sum(N ** 2))
    T = SparseTensor3.from_dense(A)
    try:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        write_tensor(T, args.output)
        sidecar = {
            "kind": args.kind, "n": n, "k": k, "seed": args.seed, "noise": args.noise,
            "density": args.density, "nnz": T.nnz,
            "planted_norm_sq": norm0 ** 2,
            "norm_sq": float(T.norm() ** 2),
            "opt_upper_bound": noise_sq,
            "factors": {name: M.tolist() for name, M in zip("UVW", facs)},
        }
        _dump_json(sidecar, str(args.output) + ".json")
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc}", EXIT_IO) from None
    print(f"wrote {args.output} (nnz={T.nnz}, opt_upper_bound={noise_sq!r})")
    return EXIT_OK


def _random_sparse(n, nnz, rng):
    lin = rng.choice(n ** 3, size=nnz, replace=False)
    coords = np.stack([lin // (n * n), (lin // n) % n, lin % n], axis=1)
    vals = rng.standard_normal(nnz)
    vals[vals == 0] = 1.0
    return SparseTensor3.from_entries(n, coords, vals)


def cmd_sketch_bench(args):
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()] if args.sizes else []
    if not sizes or min(sizes) < 1:
        raise CliError("sketch-bench needs a non-empty list of positive sizes", EXIT_CONFIG)
    n = args.n or max(2, int(np.ceil((2 * max(sizes)) ** (1 / 3))))
    if max(sizes) > n ** 3:
        raise CliError(f"size {max(sizes)} exceeds n^3 = {n ** 3}", EXIT_CONFIG)
    rng = make_rng(args.seed)
    S = countsketch_new(args.m, n * n, args.seed, (0,))
    Ts = [countsketch_new(args.m, n, args.seed, (1 + i,)) for i in range(3)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["nnz", "n", "accum_sketch_columns", "accum_contract",
                     "seconds_sketch_columns", "seconds_contract"])
    for size in sizes:
        A = _random_sparse(n, size, rng)
        flat = flatten(A, 1)
        best_s = best_c = np.inf
        for _ in range(max(1, args.repeats)):
            c1, c2 = AccumulationCounter(), AccumulationCounter()
            t0 = time.perf_counter()
            sketch_columns(flat, S, c1)
            t1 = time.perf_counter()
            contract_all_modes(A, *Ts, counter=c2)
            t2 = time.perf_counter()
            best_s, best_c = min(best_s, t1 - t0), min(best_c, t2 - t1)
        writer.writerow([size, n, c1.total, c2.total, f"{best_s:.6g}", f"{best_c:.6g}"])
    text = buf.getvalue()
    if args.output:
        try:
            Path(args.output).write_text(text)
        except OSError as exc:
            raise CliError(f"cannot write {args.output}: {exc}", EXIT_IO) from None
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_text(path):
    try:
        if path == "-":
            return sys.stdin.read()
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def cmd_pcfg(args):
    try:
        G = Grammar.from_text(_read_text(args.grammar))
    except GrammarError as exc:
        raise CliError(f"invalid grammar: {exc}", EXIT_CONFIG) from None
    words = _read_text(args.sentence).split()
    if not words:
        raise CliError("sentence is empty", EXIT_CONFIG)
    p_in = inside(G, words, log_space=args.log_space)
    p_out = outside(G, words, p_in)
    mu = marginals(p_in, p_out)
    total = p_in[1, len(words), G.root]
    label = "log_probability" if args.log_space else "probability"
    parts = [f"# sentence {label}\t{total!r}\n", p_in.to_tsv("inside"),
             p_out.to_tsv("outside"), mu.to_tsv("marginal")]
    sys.stdout.write("".join(parts))
    return EXIT_OK


def cmd_rerun(args):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read manifest {args.manifest}: {exc}", EXIT_IO) from None
    saved = dict(manifest["args"])
    if args.output_dir is not None:
        saved["output_dir"] = args.output_dir
    command = manifest.get("command")
    if command not in _RERUNNABLE:
        raise CliError(f"manifest command {command!r} cannot be re-run", EXIT_CONFIG)
    ns = argparse.Namespace(command=command, **saved)
    return _RERUNNABLE[command](ns)


_RERUNNABLE = {"approx-cycle": cmd_approx_cycle, "approx-cp": cmd_approx_cp}


def _add_pipeline_flags(p):
    p.add_argument("--input", required=True, help="tensor file (.bin for binary, else text)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--cs", type=float, default=10.0, help="sketch-size constant for s")
    p.add_argument("--ct", type=float, default=10.0, help="reduction-size constant for t")
    p.add_argument("--max-sweeps", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--sketch", choices=("composed", "gaussian"), default="composed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output-dir", default="out")
    p.add_argument("--dense-check", action="store_true",
                   help="evaluate the final residual on the dense tensor")


def build_parser():
    parser = argparse.ArgumentParser(prog="cyclerank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("approx-cycle", help="cycle-rank approximation of a tensor file")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_approx_cycle)

    p = sub.add_parser("approx-cp", help="CP-rank approximation of a tensor file")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_approx_cp)

    p = sub.add_parser("gen", help="write a planted test tensor plus a JSON sidecar")
    p.add_argument("--kind", choices=("cycle", "cp"), default="cycle")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0, help="noise norm relative to ||A0||")
    p.add_argument("--density", type=float, default=1.0, help="fraction of nonzero factor rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sketch-bench", help="time and count CountSketch applications")
    p.add_argument("--sizes", required=True, help="comma-separated nnz values")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sketch_bench)

    p = sub.add_parser("pcfg", help="inside/outside/marginal charts as TSV")
    p.add_argument("--grammar", required=True)
    p.add_argument("--sentence", default="-", help="file with whitespace-separated words, '-' for stdin")
    p.add_argument("--log-space", action="store_true")
    p.set_defaults(func=cmd_pcfg)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_rerun)
    return parser


def _configure_logging():
    level = os.environ.get("CYCLERANK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cyclerank: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
