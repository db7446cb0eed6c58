"""Command-line interface: segment, synth, kernel-table, compare.

Exit codes: 0 converged (with or without fallback), 2 iteration budget
exhausted, 3 oscillation halt, 1 usage or I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .energy import EnergyConfig
from .grid import Connectivity
from .imageio import (ImageFormatError, read_image, write_image, write_labels,
                      write_overlay)
from .optimizer import OptimizerConfig, RegionCompetition, initialize
from .report import (build_report, figure_path, render_energy_figure,
                     render_kernel_figure, trace_records, write_csv,
                     write_json, write_trace)
from .sobolev import SobolevParams, kernel_eval
from .synth import generate, load_scene

EXIT_BY_STATUS = {"converged": 0, "fallback-then-converged": 0,
                  "max-iter": 2, "oscillation-halt": 3}


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_epsilon(text: str) -> float:
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad epsilon value {text!r}") from None


def _worker_cap() -> int:
    raw = os.environ.get("RC_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError:
        raise SystemExit(f"RC_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise SystemExit("RC_THREADS must be >= 1")
    return cap


def _add_segment_flags(p: argparse.ArgumentParser, with_gradient: bool) -> None:
    p.add_argument("--input", required=True, help="input intensity raster")
    p.add_argument("--model", choices=["pc", "ps"], default="pc",
                   help="region model: piecewise constant or smooth")
    p.add_argument("--noise", choices=["gauss", "poisson"], default="gauss")
    if with_gradient:
        p.add_argument("--gradient", choices=["l2", "sobolev"], default="sobolev")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="perimeter prior weight")
    p.add_argument("--E", dest="length_scale", type=float, default=12.0,
                   help="kernel length scale (interaction cutoff is E/2)")
    p.add_argument("--epsilon", type=_parse_epsilon, default=1.0 / 24.0,
                   help='kernel shape parameter; accepts "1/24" '
                        "(default 0.0416666666666667)")
    p.add_argument("--smooth-radius", type=int, default=8,
                   help="local mean ball radius for the ps model")
    p.add_argument("--init", default="rect",
                   help="rect | bubbles:<n>[:<r>] | otsu | maxima:<sigma>:<r> "
                        "| file:<path>")
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-fusion", action="store_true")
    p.add_argument("--report", help="write a JSON run report (plus figure)")
    p.add_argument("--trace", help="write a JSON-lines iteration trace")
    p.add_argument("--particles-csv",
                   help="append per-iteration particle rows to a CSV file")


def _engine_from_args(args, image, gradient: str) -> RegionCompetition:
    energy = EnergyConfig(region_model=args.model, noise_model=args.noise,
                          lam=args.lam, smooth_radius=args.smooth_radius)
    params = SobolevParams(length_scale=args.length_scale, epsilon=args.epsilon)
    seeded = args.init.startswith(("bubbles:", "maxima:"))
    config = OptimizerConfig(gradient=gradient, max_iterations=args.max_iter,
                             seed=args.seed, allow_fusion=args.allow_fusion,
                             vanish_grace=5 if seeded else 0)
    labels = initialize(image, args.init)
    return RegionCompetition(image, labels, energy, params, config)


def _config_echo(args, gradient: str) -> dict:
    return {"input": args.input, "model": args.model, "noise": args.noise,
            "gradient": gradient, "lambda": args.lam, "E": args.length_scale,
            "epsilon": args.epsilon, "smooth_radius": args.smooth_radius,
            "init": args.init, "max_iter": args.max_iter, "seed": args.seed,
            "allow_fusion": args.allow_fusion, "rc_threads": _worker_cap()}


def _particle_sink(path):
    fh = open(path, "w")
    fh.write("iteration,pixel,owner,competitor,delta\n")

    def sink(engine, record):
        xs, owners, comps, ranked = engine.last_candidates
        for i in range(len(xs)):
            fh.write(f"{record.iteration},{xs[i]},{owners[i]},{comps[i]},"
                     f"{ranked[i]!r}\n")

    return fh, sink


def _cmd_segment(args) -> int:
    image = read_image(args.input)
    engine = _engine_from_args(args, image, args.gradient)
    fh = sink = None
    if args.particles_csv:
        fh, sink = _particle_sink(args.particles_csv)
    try:
        result = engine.run(on_iteration=sink)
    finally:
        if fh is not None:
            fh.close()
    write_labels(result.labels, args.output)
    if args.overlay:
        write_overlay(result.labels, args.overlay)
    if args.trace:
        write_trace(result.trace, args.trace)
        render_energy_figure({args.gradient: result.trace},
                             figure_path(args.trace))
    if args.report:
        report = build_report(result, _config_echo(args, args.gradient),
                              args.input, args.output)
        write_json(report, args.report)
        render_energy_figure({args.gradient: result.trace},
                             figure_path(args.report))
    print(f"{result.status}: {result.iterations} iterations, "
          f"energy {result.final_energy.total:.6g}, "
          f"{result.region_count} foreground regions")
    return EXIT_BY_STATUS[result.status]


def _cmd_compare(args) -> int:
    image = read_image(args.input)
    results = {}
    for gradient in ("l2", "sobolev"):
        engine = _engine_from_args(args, image, gradient)
        results[gradient] = engine.run()
        write_labels(results[gradient].labels,
                     f"{args.output_prefix}-{gradient}{args.label_ext}")
    if args.report:
        payload = {}
        for gradient, result in results.items():
            payload[gradient] = build_report(
                result, _config_echo(args, gradient), args.input,
                f"{args.output_prefix}-{gradient}{args.label_ext}")
        l2, so = results["l2"], results["sobolev"]
        payload["iteration_ratio"] = (so.iterations / l2.iterations
                                      if l2.iterations else None)
        l2_per = l2.wall_seconds / max(l2.iterations, 1)
        so_per = so.wall_seconds / max(so.iterations, 1)
        payload["seconds_per_iteration_ratio"] = (so_per / l2_per
                                                  if l2_per > 0 else None)
        write_json(payload, args.report)
        base, _ = os.path.splitext(args.report)
        rows = []
        depth = max(l2.iterations, so.iterations)
        for i in range(depth):
            row = [i + 1]
            for r in (l2, so):
                if i < r.iterations:
                    row += [repr(r.trace[i].energy), r.trace[i].moves]
                else:
                    row += ["", ""]
            rows.append(row)
        write_csv(base + ".csv",
                  ["iteration", "energy_l2", "moves_l2",
                   "energy_sobolev", "moves_sobolev"], rows)
        render_energy_figure({"l2": l2.trace, "sobolev": so.trace},
                             base + ".png")
    for gradient, result in results.items():
        print(f"{gradient}: {result.status} in {result.iterations} iterations, "
              f"energy {result.final_energy.total:.6g}")
    worst = max(results.values(), key=lambda r: EXIT_BY_STATUS[r.status])
    return EXIT_BY_STATUS[worst.status]


def _cmd_synth(args) -> int:
    spec = load_scene(args.spec)
    labels, image = generate(spec)
    write_image(image, args.out_image)
    write_labels(labels, args.out_truth)
    print(f"wrote {args.out_image} and {args.out_truth} "
          f"({'x'.join(str(d) for d in spec.dims)})")
    return 0


def _cmd_kernel_table(args) -> int:
    params = SobolevParams(length_scale=args.length_scale, epsilon=args.epsilon)
    half = params.length_scale / 2.0
    r = np.linspace(-half, half, args.samples)
    values = kernel_eval(r, params)
    write_csv(args.out, ["r", "kernel"],
              [[repr(float(a)), repr(float(b))] for a, b in zip(r, values)])
    render_kernel_figure(r, values, figure_path(args.out))
    return 0


def main(argv=None) -> int:
    parser = _Parser(prog="rcseg",
                     description="Particle-based region competition segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_seg = sub.add_parser("segment", help="segment one raster",
                           parents=[], add_help=True)
    _add_segment_flags(p_seg, with_gradient=True)
    p_seg.add_argument("--output", required=True, help="output label raster")
    p_seg.add_argument("--overlay", help="write an 8-bit contour mask")
    p_seg.set_defaults(func=_cmd_segment)

    p_cmp = sub.add_parser("compare", help="run both gradient flows side by side")
    _add_segment_flags(p_cmp, with_gradient=False)
    p_cmp.add_argument("--output-prefix", required=True,
                       help="label outputs get '-l2'/'-sobolev' suffixes")
    p_cmp.add_argument("--label-ext", default=".pgm",
                       help="extension for label outputs (default .pgm)")
    p_cmp.set_defaults(func=_cmd_compare)

    p_syn = sub.add_parser("synth", help="generate a synthetic benchmark")
    p_syn.add_argument("--spec", required=True, help="scene spec JSON file")
    p_syn.add_argument("--out-image", required=True)
    p_syn.add_argument("--out-truth", required=True)
    p_syn.set_defaults(func=_cmd_synth)

    p_ker = sub.add_parser("kernel-table", help="dump the smoothing kernel")
    p_ker.add_argument("--E", dest="length_scale", type=float, default=12.0)
    p_ker.add_argument("--epsilon", type=_parse_epsilon, default=1.0 / 24.0)
    p_ker.add_argument("--samples", type=int, default=241)
    p_ker.add_argument("--out", required=True, help="CSV output path")
    p_ker.set_defaults(func=_cmd_kernel_table)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ImageFormatError, ValueError) as exc:
        print(f"rcseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
