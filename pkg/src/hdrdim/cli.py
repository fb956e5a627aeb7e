"""Command-line interface.

Commands::

    hdrdim dim       IMAGES --algo {max,avg,lp,imf,opt} [--pa P]
    hdrdim compare   IMAGES --algos max,avg,opt [--pa P]
    hdrdim simulate  IMAGE --backlight FILE
    hdrdim sweep     IMAGES --algo opt --pa-list 0,0.25,0.5
    hdrdim train     DATASET_DIR
    hdrdim eval      IMAGES --checkpoint MODEL.npz --pa-list 0.1,0.9

Every command accepts ``--config FILE`` (INI, see :mod:`hdrdim.config`),
repeated ``--set section.key=value`` overrides and ``-o/--out DIR``.

Per-image reports use the columns in :data:`REPORT_COLUMNS`; sweeps use
:data:`SWEEP_COLUMNS`. Files that fail are listed in ``errors.csv`` (or the
``errors`` member of the JSON report) and the batch carries on.

Exit codes: 0 success, 1 at least one input failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .dbldnet.model import ShapeMismatchError, load_checkpoint, save_checkpoint
from .dbldnet.train import predict, train, write_history
from .dimmers import KINDS, run_dimmer
from .display import load_backlight, prepare_target, save_backlight, simulate_full
from .hdrio import HdrDecodeError, HdrImage, read_image, write_image
from .metrics import evaluate
from .optim import optimize_backlight, write_trace

log = logging.getLogger("hdrdim")

REPORT_COLUMNS = ("image", "algo", "p_a", "psr", "pu_psnr", "pu_ms_ssim", "clipping_fraction")
SWEEP_COLUMNS = ("algo", "p_a", "pa_ignored", "n_images", "median_psr", "median_pu_psnr", "median_pu_ms_ssim")
ERROR_COLUMNS = ("image", "error")
ALGOS = KINDS + ("opt",)
IMAGE_SUFFIXES = (".hdr", ".pic", ".rgbe", ".pfm")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class UsageError(C.ConfigError):
    pass


# ----------------------------------------------------------------------------
# Shared plumbing


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def expand_inputs(patterns) -> list[Path]:
    """Expand globs and directories, keeping first-seen order and dropping duplicates."""
    out, seen = [], set()
    for pat in patterns:
        p = Path(pat)
        if p.is_dir():
            hits = sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        elif any(ch in pat for ch in "*?["):
            hits = [Path(q) for q in sorted(glob.glob(pat))]
        else:
            hits = [p]  # a missing file becomes a per-file error later
        for q in hits:
            if q not in seen:
                seen.add(q)
                out.append(q)
    if not out:
        raise UsageError("no input images")
    return out


def load_target(path: Path, rc: C.RunConfig):
    """Read an image and return ``(display config, target in cd/m^2)``."""
    img = read_image(path)
    if img.channels != 3:
        raise HdrDecodeError(f"{path}: expected an RGB image")
    cfg = rc.display.build(img.height, img.width)
    return cfg, prepare_target(img, cfg)


def backlight_for(algo: str, target: HdrImage, cfg, rc: C.RunConfig, p_a: float | None):
    if algo == "opt":
        lc = rc.loss if p_a is None else rc.loss.with_pa(p_a)
        res = optimize_backlight(target, cfg, lc, rc.optim)
        return res.backlight, res
    return run_dimmer(dataclasses.replace(rc.dimmer, kind=algo), target, cfg), None


def report_row(image: str, algo: str, p_a, target, backlight, cfg, rc) -> dict:
    sim = simulate_full(target, backlight, cfg)
    m = evaluate(target, sim.displayed, backlight, sim.clipping_fraction, cfg.peak_nits, rc.curve())
    return {"image": image, "algo": algo, "p_a": p_a, "psr": m.psr, "pu_psnr": m.pu_psnr,
            "pu_ms_ssim": m.pu_ms_ssim, "clipping_fraction": m.clipping_fraction}


def write_table(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_report(out: Path, name: str, columns, rows, errors, fmt: str) -> Path:
    """Write ``name.csv`` (+ ``errors.csv`` when needed) or ``name.json``."""
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out / f"{name}.json"
        payload = {"columns": list(columns),
                   "rows": [{c: r.get(c) for c in columns} for r in rows],
                   "errors": [{c: e.get(c) for c in ERROR_COLUMNS} for e in errors]}
        path.write_text(json.dumps(payload, indent=1) + "\n")
        return path
    path = out / f"{name}.csv"
    write_table(path, columns, rows)
    err = out / "errors.csv"
    if errors:
        write_table(err, ERROR_COLUMNS, errors)
    elif err.exists():
        err.unlink()
    return path


def _map(fn, items, jobs: int):
    """Ordered map, optionally over a process pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _guard(fn, path: Path):
    """Run ``fn`` and turn per-file failures into an error record."""
    try:
        return fn(), None
    except C.ConfigError:
        raise
    except (OSError, ValueError, HdrDecodeError) as exc:
        log.warning("%s: %s", path, exc)
        return None, {"image": str(path), "error": f"{type(exc).__name__}: {exc}"}


def parse_pa_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad p_a list {text!r}") from exc
    if not vals:
        raise UsageError("p_a list is empty")
    for v in vals:
        if not 0 <= v <= 1.25:
            raise UsageError(f"p_a {v} outside [0, 1.25]")
    return vals


# ----------------------------------------------------------------------------
# Commands (each returns an exit code)


def _dim_one(job):
    path, algos, p_a, rc, out, bl_ext, save = job

    def work():
        cfg, target = load_target(path, rc)
        rows = []
        for algo in algos:
            b, res = backlight_for(algo, target, cfg, rc, p_a)
            if save:
                save_backlight(b, out / f"{path.stem}.{algo}.backlight{bl_ext}")
                if res is not None:
                    write_trace(res.trace, out / f"{path.stem}.{algo}.trace.csv")
            rows.append(report_row(str(path), algo, p_a if algo == "opt" else None, target, b, cfg, rc))
        return rows

    return _guard(work, path)


def _run_batch(images, algos, p_a, rc, out, args, save=True, name="report"):
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(p, algos, p_a, rc, out, args.backlight_ext, save) for p in images]
    rows, errors = [], []
    for r, e in _map(_dim_one, jobs, args.jobs):
        if e is not None:
            errors.append(e)
        else:
            rows.extend(r)
    path = write_report(out, name, REPORT_COLUMNS, rows, errors, rc.report_format)
    log.info("wrote %s (%d rows, %d errors)", path, len(rows), len(errors))
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_dim(args, rc):
    p_a = rc.loss.p_a if args.pa is None else args.pa
    return _run_batch(expand_inputs(args.images), [args.algo], p_a, rc, Path(args.out), args)


def cmd_compare(args, rc):
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    bad = [a for a in algos if a not in ALGOS]
    if bad or not algos:
        raise UsageError(f"unknown algorithms {bad}; choose from {ALGOS}")
    p_a = rc.loss.p_a if args.pa is None else args.pa
    return _run_batch(expand_inputs(args.images), algos, p_a, rc, Path(args.out), args,
                      save=False, name="compare")


def cmd_simulate(args, rc):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.image)
    cfg, target = load_target(path, rc)
    try:
        b = load_backlight(args.backlight, cfg.layout)
    except (OSError, ValueError) as exc:
        raise UsageError(f"backlight {args.backlight}: {exc}") from exc
    sim = simulate_full(target, b, cfg)
    ext = "." + args.ext.lstrip(".")
    write_image(sim.displayed, out / f"{path.stem}.displayed{ext}")
    write_image(HdrImage(sim.diffusion[:, :, None], 1.0, True), out / f"{path.stem}.diffusion.pfm")
    diag = {"image": str(path), "clipping_fraction": sim.clipping_fraction,
            "max_diffusion": float(sim.diffusion.max()), "backlight": str(args.backlight)}
    (out / f"{path.stem}.simulate.json").write_text(json.dumps(diag, indent=1) + "\n")
    return EXIT_OK


def _median(vals):
    return float(np.median(vals)) if vals else None


def cmd_sweep(args, rc):
    images = expand_inputs(args.images)
    out = Path(args.out)
    algo = args.algo
    classical = algo != "opt"
    pa_list = [None] if classical else parse_pa_list(args.pa_list)
    all_rows, errors, table = [], [], []
    failed = set()
    for p_a in pa_list:
        jobs = [(p, [algo], p_a, rc, out, args.backlight_ext, False) for p in images if p not in failed]
        rows = []
        for p, (r, e) in zip([j[0] for j in jobs], _map(_dim_one, jobs, args.jobs)):
            if e is not None:
                failed.add(p)
                errors.append(e)
            else:
                rows.extend(r)
        all_rows.extend(rows)
        table.append({"algo": algo, "p_a": p_a, "pa_ignored": int(classical), "n_images": len(rows),
                      "median_psr": _median([r["psr"] for r in rows]),
                      "median_pu_psnr": _median([r["pu_psnr"] for r in rows]),
                      "median_pu_ms_ssim": _median([r["pu_ms_ssim"] for r in rows])})
    write_report(out, "sweep_rows", REPORT_COLUMNS, all_rows, errors, rc.report_format)
    if rc.report_format == "json":
        (out / "sweep.json").write_text(json.dumps({"columns": list(SWEEP_COLUMNS), "rows": table}, indent=1) + "\n")
    else:
        write_table(out / "sweep.csv", SWEEP_COLUMNS, table)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_train(args, rc):
    images = expand_inputs([args.dataset])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data, errors, cfg = [], [], None
    for p in images:
        img, err = _guard(lambda: read_image(p), p)
        if err is not None:
            errors.append(err)
            continue
        c = rc.display.build(img.height, img.width)
        if cfg is not None and c.layout.shape != cfg.layout.shape:
            errors.append({"image": str(p), "error": "image size differs from the first training image"})
            continue
        cfg = c
        data.append(img)
    if not data:
        write_report(out, "train_errors", ERROR_COLUMNS, errors, [], "csv")
        raise UsageError("no readable training images")
    params, history = train(data, cfg, rc.loss, rc.net, rc.optim, rc.train)
    save_checkpoint(params, out / "model.npz", extra={"config": C.dump(rc)})
    write_history(history, out / "history.csv")
    if errors:
        write_table(out / "errors.csv", ERROR_COLUMNS, errors)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_eval(args, rc):
    try:
        params = load_checkpoint(args.checkpoint, rc.net)
    except ShapeMismatchError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    pa_list = parse_pa_list(args.pa_list)
    images = expand_inputs(args.images)
    rows, errors = [], []
    for p in images:
        def work(p=p):
            cfg, target = load_target(p, rc)
            out = []
            for p_a in pa_list:
                b = predict(params, target.data, p_a, cfg)
                out.append(report_row(str(p), "dbld", p_a, target, b, cfg, rc))
            return out
        r, e = _guard(work, p)
        if e is not None:
            errors.append(e)
        else:
            rows.extend(r)
    write_report(Path(args.out), "eval", REPORT_COLUMNS, rows, errors, rc.report_format)
    return EXIT_PARTIAL if errors else EXIT_OK


# ----------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI config file (default: ${C.ENV_VAR})")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--format", choices=C.FORMATS, help="report format")
    common.add_argument("--leds", metavar="ROWSxCOLS", help="LED grid, e.g. 12x22")
    common.add_argument("--peak", type=float, help="display peak luminance (cd/m^2)")
    common.add_argument("--leak-floor", type=float, help="LC leakage floor")
    common.add_argument("--psf", help="PSF kernel (.pfm)")
    common.add_argument("-o", "--out", default=".", help="output directory")
    common.add_argument("-j", "--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--backlight-ext", choices=(".json", ".csv"), default=".json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hdrdim", description="Local backlight dimming for dual-panel HDR displays.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dim", parents=[common], help="compute backlights and a metric report")
    p.add_argument("images", nargs="+")
    p.add_argument("--algo", choices=ALGOS, default="max")
    p.add_argument("--pa", type=float, help="power parameter for --algo opt")
    p.set_defaults(func=cmd_dim)

    p = sub.add_parser("compare", parents=[common], help="several algorithms over one image set")
    p.add_argument("images", nargs="+")
    p.add_argument("--algos", default=",".join(ALGOS))
    p.add_argument("--pa", type=float)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", parents=[common], help="simulate the displayed image")
    p.add_argument("image")
    p.add_argument("--backlight", required=True)
    p.add_argument("--ext", choices=("pfm", "hdr"), default="pfm")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="median metrics across power parameters")
    p.add_argument("images", nargs="+")
    p.add_argument("--algo", choices=ALGOS, default="opt")
    p.add_argument("--pa-list", default="0,0.25,0.5,0.75,1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", parents=[common], help="train the backlight predictor")
    p.add_argument("dataset", help="directory of equally sized training images")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained predictor")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pa-list", default="0.1,0.9")
    p.set_defaults(func=cmd_eval)
    return parser


def overrides_from_args(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v
    if args.leds:
        try:
            r, c = args.leds.lower().split("x")
            ov["display.led_rows"], ov["display.led_cols"] = str(int(r)), str(int(c))
        except ValueError as exc:
            raise UsageError(f"--leds expects ROWSxCOLS, got {args.leds!r}") from exc
    if args.peak is not None:
        ov["display.peak_nits"] = str(args.peak)
    if args.leak_floor is not None:
        ov["display.leak_floor"] = str(args.leak_floor)
    if args.psf:
        ov["display.psf"] = args.psf
    if args.format:
        ov["output.format"] = args.format
    if getattr(args, "iterations", None) is not None:
        ov["train.iterations"] = str(args.iterations)
    if getattr(args, "seed", None) is not None:
        ov["train.seed"] = str(args.seed)
    if getattr(args, "pa", None) is not None:
        ov["loss.p_a"] = str(args.pa)
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = C.load(args.config, overrides_from_args(args))
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args, rc)
    except ShapeMismatchError as exc:
        print(f"hdrdim: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except C.ConfigError as exc:
        print(f"hdrdim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
