"""Command-line pipeline: simulate, fbp, reconstruct, evaluate.

Every command resolves its settings from three layers, lowest first: the
preset, an optional ``--manifest`` from an earlier run, and explicit flags.
The resolved settings are written to ``manifest_<command>.txt`` in the
output directory; passing that file back with ``--manifest`` reproduces the
outputs bit for bit.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .fbp import fbp_reconstruct
from .field import FieldConfig
from .geometry import (DeformationParams, TiltSeries, add_noise, deform_image, forward_all,
                       make_phantom, sample_deformations, tilt_angles)
from .io import (MrcError, TableFormatError, read_deformations, read_manifest, read_mrc,
                 write_deformation_table, write_deformations, write_fsc_csv, write_history,
                 write_manifest, write_mrc, write_weights)
from .metrics import deformation_error, fsc, fsc_resolution
from .training import TrainConfig, TrainingDiverged, extract_tomogram, train

log = logging.getLogger("deformatomo")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

# name -> (type, help)
SETTINGS = {
    "size": (int, "volume side length N"),
    "tilts": (int, "number of tilts M"),
    "angle_range": (float, "tilts are spread evenly over +-angle_range degrees"),
    "snr_db": (float, "noise level in dB after deformation ('inf' for none)"),
    "shift_bound_px": (float, "shift bound in pixels"),
    "shear_bound": (float, "shear bound as a fraction"),
    "rot_bound_deg": (float, "rotation bound in degrees"),
    "lambda1": (float, "weight of the data term"),
    "lambda2": (float, "weight of the operator-consistency term"),
    "lambda_theta": (float, "TV weight along the tilt axis"),
    "lambda_x": (float, "TV weight along the sensor axes"),
    "iterations": (int, "Adam iterations"),
    "lr_field": (float, "Adam learning rate of the field weights"),
    "lr_deform": (float, "Adam learning rate of the deformations (px, %%, deg units)"),
    "warmup_op": (int, "iterations before the operator term is switched on"),
    "pixel_fraction": (float, "fraction of sensor pixels used by the data term per step"),
    "width": (int, "hidden width of the field network"),
    "layers": (int, "hidden layers of the field network"),
    "frequencies": (int, "Fourier frequencies per sensor coordinate"),
    "angle_frequencies": (int, "Fourier frequencies for the tilt angle"),
    "phantom": (str, "procedural phantom: ball, ellipsoids or blobs"),
}

_COMMON = {
    "angle_range": 70.0, "snr_db": 10.0, "pixel_fraction": 1.0, "warmup_op": 0,
    "lr_field": 3e-3, "lr_deform": 5e-2, "layers": 3, "angle_frequencies": 2,
    "phantom": "ellipsoids",
}
PRESETS = {
    "desk": {**_COMMON, "size": 32, "tilts": 60, "shift_bound_px": 5.0, "shear_bound": 0.05,
             "rot_bound_deg": 5.0, "lambda1": 10.0, "lambda2": 1.0, "lambda_theta": 1e-5,
             "lambda_x": 1e-5, "iterations": 1500, "width": 64, "frequencies": 5},
    "paper-mpn": {**_COMMON, "size": 64, "tilts": 60, "shift_bound_px": 10.0, "shear_bound": 0.10,
                  "rot_bound_deg": 10.0, "lambda1": 10.0, "lambda2": 1.0, "lambda_theta": 1e-5,
                  "lambda_x": 1e-5, "iterations": 1500, "width": 128, "frequencies": 6},
    "paper-neuron": {**_COMMON, "size": 128, "tilts": 50, "shift_bound_px": 5.0, "shear_bound": 0.05,
                     "rot_bound_deg": 5.0, "lambda1": 100.0, "lambda2": 1e-2, "lambda_theta": 1e-6,
                     "lambda_x": 1e-5, "iterations": 2000, "width": 128, "frequencies": 7},
}

OUTPUTS = {
    "simulate": ["phantom.mrc", "stack.mrc", "stack_undeformed.mrc", "truth_deformations.csv"],
    "fbp": ["recon_fbp.mrc"],
    "reconstruct": ["recon_joint.mrc", "est_deformations.csv", "history.csv", "weights.bin"],
    "evaluate": ["fsc.csv", "fsc_fbp.csv", "fsc_fbp_no_deformation.csv", "deformation_table.csv"],
}
INPUTS = {
    "simulate": [],
    "fbp": ["stack.mrc", "truth_deformations.csv"],
    "reconstruct": ["stack.mrc", "truth_deformations.csv"],
    "evaluate": ["phantom.mrc", "stack.mrc", "stack_undeformed.mrc", "truth_deformations.csv",
                 "recon_joint.mrc", "est_deformations.csv"],
}


class UsageError(Exception):
    pass


def _preset_help() -> str:
    rows = []
    for name in SETTINGS:
        vals = ", ".join(f"{p} {PRESETS[p][name]}" for p in PRESETS)
        rows.append(f"  --{name.replace('_', '-')}: {vals}")
    return "preset defaults:\n" + "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    shared.add_argument("--out-dir", default=None, help="existing output directory (default .)")
    shared.add_argument("--in-dir", default=None, help="directory holding inputs (default: --out-dir)")
    shared.add_argument("--preset", choices=sorted(PRESETS), default=None,
                        help="parameter set (default desk)")
    shared.add_argument("--manifest", default=None, help="re-run with the settings of this manifest")
    shared.add_argument("--volume", default=None,
                        help="simulate from this MRC volume instead of a phantom")
    shared.add_argument("--quiet", action="store_true", help="only log warnings")
    for name, (kind, text) in SETTINGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "phantom":
            shared.add_argument(flag, choices=("ball", "ellipsoids", "blobs"), default=None, help=text)
        else:
            shared.add_argument(flag, type=kind, default=None, help=text)

    parser = argparse.ArgumentParser(prog="deformatomo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deformatomo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    about = {
        "simulate": "project a phantom, deform each tilt and add noise",
        "fbp": "filtered backprojection of the measured stack (deformations ignored)",
        "reconstruct": "joint estimation of the measurement field and deformations",
        "evaluate": "FSC curves against the phantom and the deformation-error table",
    }
    for name, text in about.items():
        sub.add_parser(name, parents=[shared], help=text, description=text, epilog=_preset_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def _convert(name: str, raw: str):
    kind = SETTINGS[name][0]
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"manifest value for {name!r} is not a valid {kind.__name__}: {raw!r}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge preset, manifest and explicit flags into one settings dict."""
    base = {}
    if args.manifest is not None:
        try:
            base = read_manifest(args.manifest)
        except (OSError, TableFormatError) as exc:
            raise OSError(f"cannot read manifest: {exc}") from exc
    preset = args.preset or base.get("preset", "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    cfg = dict(PRESETS[preset])
    for name in SETTINGS:
        if name in base:
            cfg[name] = _convert(name, base[name])
        given = getattr(args, name)
        if given is not None:
            cfg[name] = given
    cfg["preset"] = preset
    cfg["seed"] = args.seed if args.seed is not None else int(base.get("seed", 0))
    volume = args.volume if args.volume is not None else base.get("volume", "")
    cfg["volume"] = volume
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    positive = ("size", "tilts", "width", "layers", "frequencies", "angle_frequencies")
    for name in positive:
        if cfg[name] < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive, got {cfg[name]}")
    if cfg["tilts"] < 2:
        raise UsageError("--tilts must be at least 2")
    if not 0.0 < cfg["angle_range"] < 90.0:
        raise UsageError(f"--angle-range must lie in (0, 90), got {cfg['angle_range']}")
    if math.isnan(cfg["snr_db"]) or cfg["snr_db"] == -math.inf:
        raise UsageError(f"--snr-db must be a number or inf, got {cfg['snr_db']}")
    for name in ("shift_bound_px", "shear_bound", "rot_bound_deg", "lambda1", "lambda2",
                 "lambda_theta", "lambda_x", "lr_field", "lr_deform"):
        if not math.isfinite(cfg[name]) or cfg[name] < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be finite and nonnegative")
    if cfg["iterations"] < 0 or cfg["warmup_op"] < 0:
        raise UsageError("--iterations and --warmup-op must be nonnegative")
    if not 0.0 < cfg["pixel_fraction"] <= 1.0:
        raise UsageError("--pixel-fraction must lie in (0, 1]")


def _angles(cfg: dict) -> np.ndarray:
    return tilt_angles(cfg["tilts"], -cfg["angle_range"], cfg["angle_range"])


def _snr(cfg: dict) -> float | None:
    return None if math.isinf(cfg["snr_db"]) else cfg["snr_db"]


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lambda_data=cfg["lambda1"], lambda_op=cfg["lambda2"], lambda_theta=cfg["lambda_theta"],
        lambda_x=cfg["lambda_x"], iterations=cfg["iterations"], lr_field=cfg["lr_field"],
        lr_deform=cfg["lr_deform"], shift_bound_px=cfg["shift_bound_px"],
        shear_bound=cfg["shear_bound"], rot_bound_deg=cfg["rot_bound_deg"],
        warmup_op=cfg["warmup_op"], seed=cfg["seed"], pixel_fraction=cfg["pixel_fraction"],
        field=FieldConfig(frequencies=cfg["frequencies"], hidden_layers=cfg["layers"],
                          width=cfg["width"], angle_frequencies=cfg["angle_frequencies"]),
    )


def _read_stack(in_dir: Path, name: str = "stack.mrc") -> tuple[np.ndarray, np.ndarray]:
    stack = read_mrc(in_dir / name)
    _, angles = read_deformations(in_dir / "truth_deformations.csv")
    if angles.size != stack.shape[0]:
        raise TableFormatError(f"{stack.shape[0]} images but {angles.size} angles")
    return stack, angles


# --- commands ------------------------------------------------------------

def cmd_simulate(cfg: dict, in_dir: Path, out_dir: Path) -> None:
    phantom_seed, deform_seed, noise_seed = (
        int(x) for x in np.random.SeedSequence(cfg["seed"]).generate_state(3))
    if cfg["volume"]:
        volume = read_mrc(cfg["volume"])
        if volume.shape != (cfg["size"],) * 3:
            raise UsageError(f"--volume has shape {volume.shape}, expected {(cfg['size'],) * 3}")
    else:
        volume = make_phantom(cfg["phantom"], cfg["size"], phantom_seed)
    angles = _angles(cfg)
    bounds = (cfg["shift_bound_px"], cfg["shear_bound"], cfg["rot_bound_deg"])
    truth = sample_deformations(angles.size, bounds, deform_seed)
    clean = forward_all(volume, angles)
    deformed = np.stack([deform_image(img, truth[m]) for m, img in enumerate(clean)])
    # both stacks share one noise draw so the undeformed one is a fair baseline
    write_mrc(out_dir / "phantom.mrc", volume)
    write_mrc(out_dir / "stack.mrc", add_noise(deformed, _snr(cfg), noise_seed))
    write_mrc(out_dir / "stack_undeformed.mrc", add_noise(clean, _snr(cfg), noise_seed))
    write_deformations(out_dir / "truth_deformations.csv", truth, angles)
    log.info("simulated %d tilts of a %d^3 %s", angles.size, cfg["size"],
             cfg["volume"] or cfg["phantom"])


def cmd_fbp(cfg: dict, in_dir: Path, out_dir: Path) -> None:
    stack, angles = _read_stack(in_dir)
    write_mrc(out_dir / "recon_fbp.mrc", fbp_reconstruct(stack, angles, stack.shape[1]))


def cmd_reconstruct(cfg: dict, in_dir: Path, out_dir: Path) -> None:
    stack, angles = _read_stack(in_dir)
    ts = TiltSeries(stack, angles)
    result = train(ts, _train_config(cfg))
    write_mrc(out_dir / "recon_joint.mrc", extract_tomogram(result.weights, angles, ts.n))
    write_deformations(out_dir / "est_deformations.csv", result.deformations, angles)
    write_history(out_dir / "history.csv", result.history)
    write_weights(out_dir / "weights.bin", result.weights)
    log.info("timings %s", {k: round(v, 2) for k, v in result.timings.items()})


def cmd_evaluate(cfg: dict, in_dir: Path, out_dir: Path) -> None:
    for name in ("phantom.mrc", "truth_deformations.csv", "stack_undeformed.mrc"):
        if not (in_dir / name).exists():
            raise UsageError(f"evaluate needs ground truth: {in_dir / name} is missing "
                             "(run simulate into this directory first)")
    phantom = read_mrc(in_dir / "phantom.mrc")
    truth, angles = read_deformations(in_dir / "truth_deformations.csv")
    joint = read_mrc(in_dir / "recon_joint.mrc")
    est, _ = read_deformations(in_dir / "est_deformations.csv")
    stack, _ = _read_stack(in_dir)
    undeformed, _ = _read_stack(in_dir, "stack_undeformed.mrc")
    n = phantom.shape[0]
    curves = {
        "fsc.csv": fsc(joint, phantom),
        "fsc_fbp.csv": fsc(fbp_reconstruct(stack, angles, n), phantom),
        "fsc_fbp_no_deformation.csv": fsc(fbp_reconstruct(undeformed, angles, n), phantom),
    }
    for name, curve in curves.items():
        write_fsc_csv(out_dir / name, curve)
        log.info("%s: resolution at 0.5 = %.4g", name, fsc_resolution(curve))
    rows = {
        "init": deformation_error(DeformationParams.zeros(len(truth)), truth).as_row(),
        "joint": deformation_error(est, truth).as_row(),
    }
    write_deformation_table(out_dir / "deformation_table.csv", rows)
    log.info("deformation error init %s joint %s", rows["init"], rows["joint"])


COMMANDS = {"simulate": cmd_simulate, "fbp": cmd_fbp, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate}


def _thread_limit():
    raw = os.environ.get("DEFORMATOMO_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DEFORMATOMO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DEFORMATOMO_THREADS must be a positive integer, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _manifest_entries(command: str, cfg: dict, in_dir: Path, out_dir: Path) -> dict:
    entries = {"command": command, "version": __version__, "preset": cfg["preset"],
               "seed": cfg["seed"], "volume": cfg["volume"]}
    for name in SETTINGS:
        entries[name] = cfg[name]
    entries["inputs"] = " ".join(str(in_dir / f) for f in INPUTS[command])
    entries["outputs"] = " ".join(str(out_dir / f) for f in OUTPUTS[command])
    return entries


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        limit = _thread_limit()
        out_dir = Path(args.out_dir or ".")
        in_dir = Path(args.in_dir) if args.in_dir else out_dir
        if not out_dir.is_dir():
            raise FileNotFoundError(f"output directory {out_dir} does not exist")
        with limit:
            COMMANDS[args.command](cfg, in_dir, out_dir)
        write_manifest(out_dir / f"manifest_{args.command}.txt",
                       _manifest_entries(args.command, cfg, in_dir, out_dir))
    except UsageError as exc:
        print(f"deformatomo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"deformatomo: error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, MrcError, TableFormatError) as exc:
        print(f"deformatomo: error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
