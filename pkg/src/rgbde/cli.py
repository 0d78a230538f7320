"""Command-line entry point: ``rgbde <command> [options]``.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys
are option names (``per-bg`` or ``per_bg``); options given on the command
line win. Exit codes: 0 success, 1 computational failure, 2 usage or input
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import FormatError, RGBDEError

log = logging.getLogger("rgbde")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def _ensure_writable(path, force):
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} already exists (pass --force to overwrite)")
    return path


def _require(path, kind="path"):
    path = Path(path)
    if kind == "dir" and not path.is_dir():
        raise UsageError(f"directory not found: {path}")
    if kind == "file" and not path.is_file():
        raise UsageError(f"file not found: {path}")
    if kind == "path" and not path.exists():
        raise UsageError(f"not found: {path}")
    return path


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} needs --seed (no wall-clock seeding)")
    return int(args.seed)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_backgrounds(directory):
    """Every image in ``directory`` (sorted by name) as float RGB in [0, 1]."""
    directory = _require(directory, "dir")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images in {directory}")
    return [np.asarray(Image.open(p).convert("RGB"), dtype=float) / 255.0 for p in files]


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment."""
    path = _require(path, "file")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError("empty key", path, lineno)
        values[key.replace("-", "_")] = value
    return values


def _config_defaults(parser, values, source):
    """Convert config strings into defaults for ``parser``'s actions."""
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"{source}: unknown option {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            flag = value.lower() in ("1", "true", "yes", "on")
            if not flag and value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{source}: {key} expects true/false, got {value!r}")
            out[key] = flag if isinstance(action, argparse._StoreTrueAction) else not flag
        elif action.nargs in ("+", "*"):
            conv = action.type or str
            out[key] = [conv(v) for v in value.replace(",", " ").split()]
        else:
            try:
                out[key] = action.type(value) if action.type else value
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{source}: bad value for {key}: {exc}") from None
            if action.choices is not None and out[key] not in action.choices:
                raise UsageError(f"{source}: {key} must be one of {list(action.choices)}")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    from .evsim.dataset import generate_dataset, manifest_hash
    from .evsim.mesh import make_background, make_blob_mesh
    from .evsim.simulate import SimConfig
    from .tracker.sequence import load_mesh

    seed = _require_seed(args)
    out = Path(args.out)
    _ensure_writable(out / "manifest.json", args.force)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if args.backgrounds:
        backgrounds = load_backgrounds(args.backgrounds)
    else:
        backgrounds = [make_background(rng) for _ in range(args.num_backgrounds)]
    if args.mesh:
        meshes = [load_mesh(_require(m, "file")) for m in args.mesh]
    else:
        meshes = [make_blob_mesh(rng) for _ in range(args.num_meshes)]
    config = SimConfig(window_ms=args.window_ms)
    manifest = generate_dataset(meshes, backgrounds, args.per_bg, out, seed, config,
                                noise=not args.no_noise, threads=args.threads, force=args.force)
    digest = manifest_hash(out)
    print(f"wrote {manifest['count']} samples ({len(backgrounds)} backgrounds x {args.per_bg}) to {out}")
    print(f"manifest sha256 {digest}")
    return 0


def _dataset_arrays(data_dir, bins, size):
    from .evsim.dataset import load_dataset
    from .evtensor import build_spike_tensor
    from .nn.network import encode_label

    samples = load_dataset(_require(data_dir, "dir"))
    X = np.stack([build_spike_tensor(ev, bbox, 0, bins=bins, size=size).data for ev, bbox, _ in samples])
    Y = encode_label(np.stack([label for _, _, label in samples]))
    return X, Y


def cmd_train(args):
    from .evtensor import compute_normalizer
    from .nn.network import build_event_net
    from .nn.train import load_checkpoint, mirror_augment, save_checkpoint, train

    seed = _require_seed(args)
    out = _ensure_writable(args.out, args.force)
    if args.resume:
        ck = load_checkpoint(_require(args.resume, "file"), dtype=np.float32)
        net, normalizer, adam, start = ck.net, ck.normalizer, ck.adam, ck.epoch
        history = list(ck.extra.get("epoch_losses", []))
    else:
        net = build_event_net(args.profile, np.random.default_rng(np.random.SeedSequence([seed, 2])),
                              dtype=np.float32, dropout=args.dropout)
        normalizer, adam, start, history = None, None, 0, []
    bins, _, size = net.spec.input_shapes[0]
    X, Y = _dataset_arrays(args.data, bins, size)
    if normalizer is None:
        normalizer = compute_normalizer(X)
    X = (X / normalizer).astype(np.float32)
    if not args.no_mirror:
        X, Y = mirror_augment(X, Y)
    remaining = args.epochs - start
    if remaining <= 0:
        raise UsageError(f"checkpoint is already at epoch {start} of {args.epochs}")
    # one generator per run segment keeps resumed runs reproducible as well
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3, start]))
    result = train(net, X, Y, rng, epochs=remaining, batch_size=args.batch_size, base_lr=args.lr,
                   lr_step_epochs=args.lr_step, adam=adam, start_epoch=start, max_steps=args.max_steps,
                   log=print)
    history += result.epoch_losses
    if not all(math.isfinite(v) for v in result.losses):
        raise RGBDEError("non-finite loss in trace")
    epoch = start + len(result.epoch_losses)
    save_checkpoint(out, net, normalizer, adam=result.adam, epoch=epoch,
                    extra={"epoch_losses": history, "seed": seed, "samples": int(len(X))})
    print(f"trained {result.steps} steps (total {result.adam.step}), final loss {result.losses[-1]:.6g}")
    print(f"checkpoint {out} sha256 {_file_hash(out)}")
    return 0


def cmd_calibrate(args):
    from .calib import calibrate_rig, load_observations
    from .camera import save_rig

    out = _ensure_writable(args.out, args.force)
    report_path = _ensure_writable(args.report, args.force) if args.report else None
    observations, sizes = load_observations(_require(args.observations, "file"))
    missing = [c for c in ("RGB", "DEPTH", "EVENT") if c not in sizes]
    if missing:
        raise FormatError(f"no camera record for {', '.join(missing)}", args.observations)
    result = calibrate_rig(observations, sizes, rational=not args.no_rational)
    save_rig(out, result.rig)
    report = result.report()
    for cam, rms in report["intrinsics_rms_px"].items():
        print(f"{cam}: reprojection RMS {rms:.4f} px")
    for image_id, rms in report["depth_to_rgb"]["per_image_rms_px"].items():
        print(f"  image {image_id}: depth->RGB RMS {rms:.4f} px")
    if report_path is not None:
        _write_json(report_path, report)
    print(f"rig written to {out}")
    return 0


def _frame_predictor(args, seq):
    from .nn.train import load_checkpoint
    from .tracker.cascade import BlurredFrameOracle, FrameNetPredictor, OraclePredictor

    if args.frame_checkpoint:
        ck = load_checkpoint(_require(args.frame_checkpoint, "file"), dtype=np.float32)
        if ck.frame_stats is None:
            raise FormatError("frame checkpoint carries no input statistics", args.frame_checkpoint)
        return FrameNetPredictor(ck.net, ck.frame_stats)
    if args.frame_oracle == "blurred":
        return BlurredFrameOracle(seq.poses, seq.mesh.center_of_mass)
    return OraclePredictor(seq.poses)


def _event_predictor(args, seq):
    from .nn.train import load_checkpoint
    from .tracker.cascade import EventNetPredictor, OraclePredictor, ZeroPredictor

    if args.mode == "rgbd":
        return ZeroPredictor()
    if args.checkpoint:
        ck = load_checkpoint(_require(args.checkpoint, "file"), dtype=np.float32)
        if ck.normalizer is None:
            raise FormatError("event checkpoint carries no normalizer", args.checkpoint)
        return EventNetPredictor(ck.net, ck.normalizer, window_us=seq.window_us)
    if args.event_oracle:
        T = seq.rig.T_rgb_event
        return OraclePredictor([T @ p for p in seq.poses])
    raise UsageError("rgbde mode needs --checkpoint or --event-oracle")


def cmd_track(args):
    from .geom import write_poses
    from .tracker.cascade import track_sequence
    from .tracker.sequence import downsample_sequence, load_sequence

    out = _ensure_writable(args.out, args.force)
    seq = load_sequence(_require(args.sequence, "dir"))
    if args.fps != seq.fps:
        seq = downsample_sequence(seq, args.fps)
    events = _event_predictor(args, seq)
    frames = _frame_predictor(args, seq)
    result = track_sequence(seq, events, frames, mode=args.mode, reset=args.reset, iterations=args.iterations)
    write_poses(out, result.poses)
    print(f"tracked {len(result.poses)} frames ({args.mode}, {args.fps} fps): "
          f"{result.num_failures} failures")
    print(f"trace {out} sha256 {_file_hash(out)}")
    return 0


def cmd_eval(args):
    from .geom import read_poses
    from .tracker.evaluate import make_report, sequence_report
    from .tracker.sequence import SOURCE_FPS, downsample_sequence, load_sequence

    out = _ensure_writable(args.out, args.force)
    if len(args.trace) != len(args.sequence):
        raise UsageError(f"{len(args.trace)} traces for {len(args.sequence)} sequences")
    reports = []
    for trace_path, seq_dir in zip(args.trace, args.sequence):
        seq = load_sequence(_require(seq_dir, "dir"))
        trace = read_poses(_require(trace_path, "file"))
        if args.fps != seq.fps:
            full = seq.num_frames
            seq = downsample_sequence(seq, args.fps)
            if len(trace) == full:  # a full-rate trace is sampled like the sequence
                trace = trace[::SOURCE_FPS // args.fps]
        reports.append(sequence_report(Path(seq_dir).name, trace, seq.poses, seq.mesh.center_of_mass,
                                       args.fps, args.max_translation, math.radians(args.max_rotation)))
    report = make_report(reports, args.max_translation, math.radians(args.max_rotation))
    _write_json(out, report)
    for r in reports:
        print(f"{r['name']}: {r['failures']} failures over {r['frames']} frames")
    print(f"total failures {report['total_failures']}; report {out}")
    return 0


def cmd_gen_sequence(args):
    from .evsim.mesh import make_blob_mesh
    from .tracker.sequence import make_synthetic_sequence, save_sequence

    seed = _require_seed(args)
    out = Path(args.out)
    _ensure_writable(out / "sequence.json", args.force)
    mesh = make_blob_mesh(np.random.default_rng(np.random.SeedSequence([seed, 4])))
    seq = make_synthetic_sequence(np.random.default_rng(np.random.SeedSequence([seed, 5])), args.frames,
                                  mesh=mesh, max_translation=args.max_translation,
                                  max_rotation=math.radians(args.max_rotation))
    save_sequence(out, seq)
    print(f"wrote {seq.num_frames}-frame sequence with {len(seq.events)} events to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, seed=False):
    p.add_argument("--config", help="key = value file; command-line options win")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes (results do not depend on it)")
    if seed:
        p.add_argument("--seed", type=int, help="required; all randomness derives from it")


def build_parser():
    parser = argparse.ArgumentParser(prog="rgbde", description="RGB-D + event object pose tracking toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate event-network training samples")
    _common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--backgrounds", help="directory of background images (default: synthesize)")
    p.add_argument("--num-backgrounds", type=int, default=4, help="synthesized backgrounds")
    p.add_argument("--per-bg", type=int, default=10, help="samples per background")
    p.add_argument("--mesh", nargs="+", help="mesh .npz files (default: synthesize)")
    p.add_argument("--num-meshes", type=int, default=1, help="synthesized meshes")
    p.add_argument("--window-ms", type=float, default=33.0)
    p.add_argument("--no-noise", action="store_true", help="skip sensor noise events")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the event network")
    _common(p, seed=True)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--profile", choices=("toy", "full"), default="toy")
    p.add_argument("--epochs", type=int, default=40, help="total epochs, counting resumed ones")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lr-step", type=int, default=8, help="epochs per 0.3x learning-rate decay")
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--no-mirror", action="store_true", help="skip the mirrored copies of each sample")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate the three-camera rig from checkerboard corners")
    _common(p)
    p.add_argument("--observations", required=True, help="JSON Lines observation file")
    p.add_argument("--out", required=True, help="rig JSON file")
    p.add_argument("--report", help="optional JSON report with per-image RMS")
    p.add_argument("--no-rational", action="store_true", help="fit k4..k6 as zero")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("track", help="track the object through a sequence")
    _common(p)
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="pose trace file")
    p.add_argument("--mode", choices=("rgbde", "rgbd"), default="rgbde")
    p.add_argument("--checkpoint", help="event-network checkpoint")
    p.add_argument("--event-oracle", action="store_true", help="use ground truth for the event stage")
    p.add_argument("--frame-checkpoint", help="frame-network checkpoint")
    p.add_argument("--frame-oracle", choices=("exact", "blurred"), default="exact",
                   help="ground-truth frame stage when no frame checkpoint is given")
    p.add_argument("--iterations", type=int, default=3, help="frame-stage refinement rounds")
    p.add_argument("--reset", choices=("failure", "every_frame", "none"), default="failure")
    p.add_argument("--fps", type=int, choices=(30, 15, 10), default=30)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="count failures and tabulate errors for pose traces")
    _common(p)
    p.add_argument("--trace", nargs="+", required=True, help="pose trace files")
    p.add_argument("--sequence", nargs="+", required=True, help="matching sequence directories")
    p.add_argument("--out", required=True, help="report JSON file")
    p.add_argument("--fps", type=int, choices=(30, 15, 10), default=30)
    p.add_argument("--max-translation", type=float, default=0.03, help="failure threshold (m)")
    p.add_argument("--max-rotation", type=float, default=20.0, help="failure threshold (degrees)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-sequence", help="render a synthetic tracking sequence")
    _common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--max-translation", type=float, default=0.03, help="per-frame maximum (m)")
    p.add_argument("--max-rotation", type=float, default=25.0, help="per-frame maximum (degrees)")
    p.set_defaults(func=cmd_gen_sequence)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in rest if a in choices), None)
        if command is not None:
            subparser = choices[command]
            values = read_config(known.config)
            subparser.set_defaults(**_config_defaults(subparser, values, known.config))
            # required options may come from the config file
            for action in subparser._actions:
                if action.required and action.dest in values:
                    action.required = False
    return parser.parse_args(argv)


def main(argv=None):
    try:
        args = parse_args(argv)
    except (UsageError, FormatError) as exc:
        print(f"rgbde: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, FileNotFoundError, FileExistsError, NotADirectoryError) as exc:
        print(f"rgbde: error: {exc}", file=sys.stderr)
        return 2
    except (RGBDEError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"rgbde: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
