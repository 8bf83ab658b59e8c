"""``spectrum-dc`` command line.

Every command writes into a run directory (``--out``) and lists each file it
produces in ``manifest.csv`` there. Data goes to files, messages to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import evaluation as ev
from .cnn import TrainConfig
from .deepcluster import DeepClusterConfig, train
from .errors import SpectrumDCError
from .ingest import (
    RecordingConfig,
    SynthConfig,
    load_labels,
    load_psd,
    load_tiles,
    normalize,
    parse_classes,
    save_labels,
    save_psd,
    save_tiles,
    segment,
    synth_generate,
    synth_recording,
)
from .pipeline import run_baseline, run_evaluate, sweep_report
from .runlog import RunDir

log = logging.getLogger("spectrum_dc")

THREADS_ENV = "SPECTRUM_DC_THREADS"

# six content classes: empty, long and short horizontal lines, sparse and
# dense dot bursts, and a roll-off at the upper band edge
PRESETS = {
    "content6": ("noise_only,line_burst:12:1.0,line_burst:12:0.3,"
                 "dot_burst:12:0.15,dot_burst:12:0.5,edge_attenuated:15:0.5"),
}
RECORDING_PRESETS = ("edge8",)


class UsageError(Exception):
    pass


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectrum-dc",
                                description="Unsupervised representation learning for spectrum tiles.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--strict", action="store_true",
                        help="single-threaded, byte-reproducible outputs")
    common.add_argument("--threads", type=_positive, default=None,
                        help=f"BLAS threads (env {THREADS_ENV}; default: all cores)")
    common.add_argument("--config", type=Path, default=None,
                        help="key=value file with flag defaults; command-line flags win")
    common.add_argument("-q", "--quiet", action="store_true", help="only report warnings and errors")

    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate labeled synthetic tiles")
    s.add_argument("--preset", choices=sorted(PRESETS) + list(RECORDING_PRESETS), default="content6")
    s.add_argument("--classes", default=None,
                   help="comma list of kind[:snr[:duty[:edge]]]; overrides the preset")
    s.add_argument("--window", type=_positive, default=32)
    s.add_argument("--tiles-per-class", type=int, default=300)
    s.add_argument("--bands", type=_positive, default=8, help="edge8: sub-band count")
    s.add_argument("--windows", type=int, default=60, help="edge8: tiles per sub-band")

    s = sub.add_parser("segment", parents=[common], help="cut an SPSD recording into SPTL tiles")
    s.add_argument("--psd", type=Path, required=True)
    s.add_argument("--window", type=_positive, default=128)

    def sweep_flags(s):
        s.add_argument("--tiles", type=Path, required=True)
        s.add_argument("--labels", type=Path, default=None, help="ground-truth labels CSV for NMI")
        s.add_argument("--subsample-vat", type=_positive, default=ev.DEFAULT_VAT_SUBSAMPLE)
        s.add_argument("--subsample-sil", type=_positive, default=ev.DEFAULT_SILHOUETTE_SUBSAMPLE)

    s = sub.add_parser("baseline", parents=[common], help="PCA + K-means sweep on raw pixels")
    sweep_flags(s)
    s.add_argument("--k-min", type=int, default=2)
    s.add_argument("--k-max", type=int, default=30)
    s.add_argument("-n", "--components", type=_positive, default=None,
                   help="components to cluster on (default: 95%% EVR count)")
    s.add_argument("--pca-max-rows", type=_positive, default=20000)

    s = sub.add_parser("deepcluster", parents=[common], help="train the CNN with K-means pseudo-labels")
    s.add_argument("--tiles", type=Path, required=True)
    s.add_argument("-k", "--clusters", type=int, default=10)
    s.add_argument("-n", "--components", type=int, default=32)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--arch", choices=("reduced", "resnet18"), default="reduced")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--weight-decay", type=float, default=1e-5)
    s.add_argument("--batch-size", type=_positive, default=64)
    s.add_argument("--whiten", type=_bool, default=False)
    s.add_argument("--l2", type=_bool, default=True)
    s.add_argument("--balanced", type=_bool, default=True)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a tile set")
    sweep_flags(s)
    s.add_argument("--checkpoint", type=Path, default=None,
                   help="default: <out>/deepcluster/last.spck")
    s.add_argument("--whiten", type=_bool, default=False)
    s.add_argument("--l2", type=_bool, default=True)

    sub.add_parser("report", parents=[common], help="compare baseline and CNN results")
    return p


def _read_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser, argv):
    """Reparse ``argv`` with defaults taken from a ``--config`` file, if any."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return parser.parse_args(argv)
    if not known.config.is_file():
        raise UsageError(f"config file not found: {known.config}")
    values = _read_config(known.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in sub.choices.values():
        actions = {a.dest: a for a in sp._actions}
        unknown = [k for k in values if k not in actions]
        if unknown and sp.prog.split()[-1] in argv:
            raise UsageError(f"unknown config keys for {sp.prog}: {', '.join(unknown)}")
        defaults = {}
        for k, v in values.items():
            if k not in actions:
                continue
            a = actions[k]
            if isinstance(a, argparse._StoreTrueAction):
                defaults[k] = _bool(v)
            else:
                # argparse converts string defaults through ``type``
                defaults[k] = v
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")


def _load_tiles(path):
    tiles = load_tiles(path)
    if tiles.norm_bounds is None and len(tiles):
        tiles = normalize(tiles)
    return tiles


def _thread_count(args):
    if args.strict:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return None


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, run):
    if args.preset in RECORDING_PRESETS and args.classes is None:
        cfg = RecordingConfig(window=args.window, bands=args.bands, windows=args.windows, seed=args.seed)
        psd, labels = synth_recording(cfg)
        p = run.path("recording.spsd")
        save_psd(psd, p)
        run.register("recording", "psd", p)
        tiles = segment(psd, args.window)
    else:
        classes = parse_classes(args.classes or PRESETS[args.preset])
        cfg = SynthConfig(window=args.window, tiles_per_class=args.tiles_per_class,
                          classes=classes, seed=args.seed)
        tiles, labels = synth_generate(cfg)
    tiles = normalize(tiles)
    p = run.path("tiles.sptl")
    save_tiles(tiles, p)
    run.register("tiles", "tiles", p)
    p = run.path("labels.csv")
    save_labels(labels, p)
    run.register("labels", "labels", p)
    log.info("synth: %d tiles of %dx%d", len(tiles), tiles.window, tiles.window)


def cmd_segment(args, run):
    _require(args.psd)
    psd = load_psd(args.psd)
    tiles = segment(psd, args.window)
    if len(tiles):
        tiles = normalize(tiles)
    else:
        log.warning("recording is smaller than one %dx%d tile; writing an empty set",
                    args.window, args.window)
    p = run.path("tiles.sptl")
    save_tiles(tiles, p)
    run.register("tiles", "tiles", p)
    log.info("segment: %d tiles", len(tiles))


def cmd_baseline(args, run):
    _require(args.tiles, args.labels)
    if not 2 <= args.k_min <= args.k_max:
        raise UsageError("need 2 <= --k-min <= --k-max")
    tiles = _load_tiles(args.tiles)
    labels = load_labels(args.labels) if args.labels else None
    row = run_baseline(run, tiles, args.k_min, args.k_max, components=args.components,
                       labels=labels, subsample_vat=args.subsample_vat,
                       subsample_sil=args.subsample_sil, pca_max_rows=args.pca_max_rows,
                       seed=args.seed)
    log.info("baseline: best k=%s silhouette=%.4f", row["k"], row["silhouette"])


def cmd_deepcluster(args, run):
    _require(args.tiles)
    tiles = _load_tiles(args.tiles)
    tc = TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                     batch_size=args.batch_size, balanced_sampling=args.balanced, seed=args.seed)
    cfg = DeepClusterConfig(k=args.clusters, n_components=args.components, epochs=args.epochs,
                            l2_normalize=args.l2, whiten=args.whiten, train=tc, seed=args.seed,
                            arch=args.arch)
    ckdir = run.path("deepcluster", "last.spck").parent
    try:
        res = train(tiles, cfg, checkpoint_dir=ckdir)
    finally:
        for name in ("last", "best"):
            p = ckdir / f"{name}.spck"
            if p.exists():
                run.register(f"deepcluster/{name}", "checkpoint", p)
    p = run.path("deepcluster", "history.csv")
    res.history.to_csv(p, cfg.k)
    run.register("deepcluster/history", "history", p)
    p = run.path("deepcluster", "labels.csv")
    save_labels(res.clusters.assignments, p)
    run.register("deepcluster/labels", "labels", p)


def cmd_evaluate(args, run):
    ck = args.checkpoint or run.root / "deepcluster" / "last.spck"
    _require(ck, args.tiles, args.labels)
    tiles = _load_tiles(args.tiles)
    labels = load_labels(args.labels) if args.labels else None
    row = run_evaluate(run, ck, tiles, labels, subsample_vat=args.subsample_vat,
                       subsample_sil=args.subsample_sil, whiten=args.whiten,
                       l2_normalize=args.l2, seed=args.seed)
    log.info("evaluate: %s components for 95%% EVR, silhouette=%.4f",
             row["components_95"], row["silhouette"])


def cmd_report(args, run):
    for row in sweep_report(run):
        log.info("report: %s", ",".join(str(v) for v in row))


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "baseline": cmd_baseline,
    "deepcluster": cmd_deepcluster,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spectrum-dc: error: {exc}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        threads = _thread_count(args)
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, RunDir(args.out, args.seed))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spectrum-dc: error: {exc}", file=sys.stderr)
        return 2
    except (SpectrumDCError, ValueError, OSError) as exc:
        print(f"spectrum-dc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("spectrum-dc: interrupted", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
