"""Command line entry point: ``semtex <stage> <dataset.toml> <workdir> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .atlas import MeshError
from .dataset import DataError, load_dataset
from .labelprop import PropagationParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _levels(s):
    try:
        vals = [float(x) for x in s.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("comma separated numbers expected") from exc
    if any(not 0 <= v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("levels must lie in [0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semtex", description="Semantic texture fusion pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=_positive_int, default=None, help="cap on worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def stage(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config", help="dataset TOML file")
        sp.add_argument("work", help="work directory holding stage checkpoints")
        return sp

    sp = stage("estimate-normals", "oriented point cloud from the organized scans")
    sp.add_argument("--rdp-epsilon", type=float, default=0.05, help="simplification tolerance in meters")
    sp.add_argument("--max-azimuth-gap", type=float, default=None, help="drop triangles spanning wider gaps (radians)")

    sp = stage("fuse", "fuse segmentations and RGB into the mesh textures")
    sp.add_argument("--texture-size", type=_positive_int, default=4096)
    sp.add_argument("--page-size", type=_positive_int, default=128)
    sp.add_argument("--decommit-threshold", type=float, default=0.1)
    sp.add_argument("--dmin", type=float, default=None, help="full-weight distance in meters (config, else 0)")
    sp.add_argument("--dmax", type=float, default=None, help="zero-weight distance in meters (config, else 100)")
    sp.add_argument("--sweep-every", type=int, default=1, help="decommit sweep period in frames (0: once at the end)")
    sp.add_argument("--no-color", action="store_true")

    sp = stage("propagate", "score frames against the fused labels and write a retraining set")
    sp.add_argument("--p-min", type=float, default=0.8)
    sp.add_argument("--fraction", type=float, default=0.05)
    sp.add_argument("--min-spacing", type=int, default=10)
    sp.add_argument("--mode", choices=("worse", "best"), default="worse")
    sp.add_argument("--iteration", type=_positive_int, default=1)
    sp.add_argument("--segmentations", default=None, help="retrained predictions to re-fuse from scratch")

    stage("evaluate", "back-projected IoU against ground-truth label images")

    sp = stage("robustness", "IoU under increasing pose noise")
    sp.add_argument("--levels", type=_levels, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    sp.add_argument("--seed", type=int, default=0)

    sp = stage("export", "write OBJ + MTL + semantic and colour PNGs")
    sp.add_argument("--out", default=None)

    sp = stage("run", "all stages in order")
    sp.add_argument("--texture-size", type=_positive_int, default=4096)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("out", help="output directory")
    sp.add_argument("--kind", choices=("street", "room"), default="street")
    sp.add_argument("--width", type=_positive_int, default=320)
    sp.add_argument("--height", type=_positive_int, default=240)
    sp.add_argument("--frames", type=_positive_int, default=None)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--noise-cell", type=_positive_int, default=1, help="side of the pixel blocks that share one label error")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _run(args) -> None:
    if args.command == "synth":
        cfg = pipeline.write_synthetic_dataset(args.out, args.kind, args.width, args.height, args.frames, args.noise, seed=args.seed, noise_cell=args.noise_cell)
        print(cfg)
        return
    ds = load_dataset(args.config)
    if args.command == "estimate-normals":
        print(pipeline.estimate_normals(ds, args.work, args.rdp_epsilon, args.max_azimuth_gap))
    elif args.command == "fuse":
        d_min = args.dmin if args.dmin is not None else ds.fusion.get("d_min", 0.0)
        d_max = args.dmax if args.dmax is not None else ds.fusion.get("d_max", 100.0)
        settings = pipeline.FuseSettings(
            args.texture_size, args.page_size, args.decommit_threshold, float(d_min), float(d_max), args.sweep_every, not args.no_color
        )
        store = pipeline.fuse(ds, args.work, settings)
        st = store.memory_stats()
        print(f"committed pages: {st.committed_pages} ({100 * st.committed_fraction:.2f}% of dense)")
    elif args.command == "propagate":
        params = PropagationParams(args.p_min, args.fraction, args.min_spacing, args.mode)
        manifest, summary = pipeline.propagate(ds, args.work, params, args.iteration, args.segmentations)
        print(f"mean gamma {summary['mean_gamma']:.3f}; selected {summary['selection']}; manifest {manifest}")
    elif args.command == "evaluate":
        report, single = pipeline.evaluate(ds, args.work)
        print(report.table())
        print(f"single-frame mean IoU: {single:.3f}")
    elif args.command == "robustness":
        for level, rep in pipeline.robustness(ds, args.work, args.levels, args.seed):
            print(f"noise {level:.2f}: mean IoU {rep.mean:.3f}")
    elif args.command == "export":
        for path in pipeline.export(ds, args.work, args.out):
            print(path)
    elif args.command == "run":
        settings = pipeline.FuseSettings(
            texture_size=args.texture_size, d_min=float(ds.fusion.get("d_min", 0.0)), d_max=float(ds.fusion.get("d_max", 100.0))
        )
        print(pipeline.run_all(args.config, args.work, settings, args.seed).table())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        _run(args)
    except (DataError, MeshError, OSError, ValueError) as exc:
        print(f"semtex: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
