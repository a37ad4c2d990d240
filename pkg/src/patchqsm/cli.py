"""Command-line front end: ``patchqsm {phantom,forward,recon,metrics,slice}``.

Volumes are addressed by stem (``out/chi`` means ``out/chi.hdr`` plus
``out/chi.f32``). Every command that writes a volume also writes
``<stem>.json`` with the resolved parameters and seeds. Exit status is 0 on
success, 1 for data or runtime errors and 2 for usage or configuration
errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .baselines import method_reconstructor, param_search, recon_tgv, recon_tv
from .config import ConfigError, RunConfig, load_config
from .metrics import evaluate, write_report
from .pdip import DivergenceError, run, write_history
from .phantom import NOISE_GENERATOR, NoiseSpec, add_noise, phantom_mask, rasterize
from .spectral import build_dipole_kernel, forward_field
from .volume import Mask, Volume, VolumeFormatError, export_slice, load_volume, save_volume, volume_paths

log = logging.getLogger("patchqsm")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
METHODS = ("tkd", "tv", "tgv", "pdip")


class UsageError(Exception):
    """Bad command-line arguments discovered after parsing."""


def _stem(path) -> Path:
    return volume_paths(path)[0].with_suffix("")


def _write_meta(stem: Path, meta: dict) -> Path:
    path = stem.with_name(stem.name + ".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or (), args.seed)


def _load(path) -> Volume:
    header, raw = volume_paths(path)
    if not header.exists() and not raw.exists():
        raise FileNotFoundError(f"volume not found: {_stem(path)}")
    return load_volume(path)


def _load_mask(path, dims):
    if path is None:
        return None
    mask = Mask.from_volume(_load(path))
    mask.check(dims)
    return mask


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    cfg = _config(args)
    stem = _stem(args.out)
    chi = rasterize(cfg.phantom)
    mask = phantom_mask(cfg.phantom)
    save_volume(chi, stem)
    mask_stem = stem.with_name(stem.name + "_mask")
    save_volume(mask.to_volume(chi.spacing), mask_stem)
    p = cfg.phantom
    _write_meta(stem, {
        "command": "phantom",
        "dims": list(p.dims),
        "spacing": list(p.spacing),
        "background": p.background,
        "mask_radius": p.mask_radius,
        "shapes": [{"type": type(s).__name__.lower(), **{k: v for k, v in vars(s).items()}}
                   for s in p.shapes],
        "mask": str(mask_stem),
    })
    print(f"wrote {stem} and {mask_stem}")
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _config(args)
    chi = _load(args.chi)
    noise = cfg.noise()
    if args.sigma is not None:
        if args.sigma < 0:
            raise ConfigError(f"--sigma must be non-negative, got {args.sigma}")
        noise = NoiseSpec(args.sigma, noise.seed)
    kernel = build_dipole_kernel(chi.dims, chi.spacing)
    phi = add_noise(forward_field(chi, kernel), noise)
    stem = _stem(args.out)
    save_volume(phi, stem)
    _write_meta(stem, {
        "command": "forward",
        "input": str(_stem(args.chi)),
        "run_seed": cfg.seed,
        "noise_sigma": noise.sigma,
        "noise_seed": noise.seed,
        "generator": NOISE_GENERATOR,
    })
    print(f"wrote {stem}")
    return EXIT_OK


def _solver(method, cfg: RunConfig, phi, kernel):
    """``value -> (chi, history)`` for the method's searchable weight, and its default."""
    if method == "tkd":
        return (lambda t: (method_reconstructor("tkd", phi, kernel)(t), None)), cfg.tkd.threshold
    if method == "tv":
        def tv(lam):
            hist = []
            c = cfg.tv
            return recon_tv(phi, kernel, replace(c, lam=lam), hist), hist
        return tv, cfg.tv.lam
    if method == "tgv":
        def tgv(a1):
            hist = []
            c = cfg.tgv
            # alpha0 follows alpha1 unless the ratio was configured explicitly
            a0 = c.alpha0 * a1 / c.alpha1
            return recon_tgv(phi, kernel, replace(c, alpha1=a1, alpha0=a0), hist), hist
        return tgv, cfg.tgv.alpha1
    pcfg = cfg.pdip_config()

    def pdip(mu):
        res = run(phi, kernel, replace(pcfg, mu=mu), cfg.net)
        return res.chi, res.history
    return pdip, pcfg.mu


_WEIGHT_NAME = {"tkd": "threshold", "tv": "lam", "tgv": "alpha1", "pdip": "mu"}


def cmd_recon(args) -> int:
    cfg = _config(args)
    phi = _load(args.phi)
    kernel = build_dipole_kernel(phi.dims, phi.spacing)
    solve, default = _solver(args.method, cfg, phi.array, kernel)
    meta = {"command": "recon", "method": args.method, "input": str(_stem(args.phi)),
            "run_seed": cfg.seed}
    grid = cfg.grids.get(args.method)
    if args.gt is not None and grid:
        gt = _load(args.gt)
        if gt.dims != phi.dims:
            raise ValueError(f"ground truth dims {gt.dims} differ from field dims {phi.dims}")
        mask = _load_mask(args.mask, gt.dims)
        runs = {}

        def recon(value):
            runs[value] = solve(value)
            return runs[value][0]

        value, chi, table = param_search(recon, gt.array, grid, mask)
        history = runs[value][1]
        meta["search"] = [{"value": v, "rmse": e} for v, e in table]
    else:
        if args.gt is not None:
            log.warning("no [%s] grid configured; using the fixed parameter", args.method)
        value = default
        chi, history = solve(value)
    meta[_WEIGHT_NAME[args.method]] = value
    if args.method == "pdip":
        p = cfg.pdip_config()
        meta.update(patch=list(p.patch), stride=list(p.stride), outer_iters=p.outer_iters,
                    inner_epochs=p.inner_epochs, lr=p.lr, tol=p.tol, init=p.init,
                    pdip_seed=p.seed, weight_seed=p.weight_seed(), noise_seed=p.noise_seed(),
                    levels=cfg.net.levels, base_channels=cfg.net.base_channels,
                    generator=NOISE_GENERATOR)
    stem = _stem(args.out)
    save_volume(phi.with_array(chi), stem)
    if history is not None:
        hist_path = stem.with_name(stem.name + "_history.csv")
        if args.method == "pdip":
            write_history(history, hist_path)
        else:
            hist_path.parent.mkdir(parents=True, exist_ok=True)
            lines = ["iter,objective"] + [f"{it},{obj!r}" for it, obj in history]
            hist_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta["history"] = str(hist_path)
    _write_meta(stem, meta)
    print(f"wrote {stem} ({_WEIGHT_NAME[args.method]}={value})")
    return EXIT_OK


def _labelled(item: str):
    label, sep, path = item.partition("=")
    if not sep:
        return _stem(item).name, item
    if not label:
        raise UsageError(f"empty label in {item!r}")
    return label, path


def cmd_metrics(args) -> int:
    cfg = _config(args)
    gt = _load(args.gt)
    mask = _load_mask(args.mask, gt.dims)
    reports = []
    for item in args.recs:
        label, path = _labelled(item)
        rec = _load(path)
        if rec.dims != gt.dims:
            raise ValueError(f"{label}: dims {rec.dims} differ from ground truth {gt.dims}")
        reports.append(evaluate(label, rec.array, gt.array, mask, cfg.data_range))
    write_report(reports, args.out)
    for r in reports:
        print(",".join(r.row()))
    return EXIT_OK


def _window(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"window must be lo,hi, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be two numbers, got {text!r}") from None


def cmd_slice(args) -> int:
    v = _load(args.volume)
    try:
        export_slice(v, args.axis, args.index, args.window, args.out)
    except IndexError as exc:
        raise ValueError(str(exc)) from exc
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _seed_arg(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=_seed_arg, help="global seed, overrides [run] seed")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="patchqsm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="rasterize the configured phantom and its mask")
    p.add_argument("--out", required=True, help="output stem; the mask goes to <stem>_mask")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("forward", parents=[common], help="simulate the field of a susceptibility map")
    p.add_argument("chi", help="susceptibility volume stem")
    p.add_argument("--sigma", type=float, help="noise standard deviation, overrides [noise] sigma")
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("recon", parents=[common], help="reconstruct susceptibility from a field")
    p.add_argument("method", choices=METHODS)
    p.add_argument("phi", help="field volume stem")
    p.add_argument("--out", required=True, help="output stem")
    p.add_argument("--gt", help="ground truth stem; with a configured grid, picks the lowest-RMSE value")
    p.add_argument("--mask", help="mask stem used by the parameter search")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("metrics", parents=[common], help="RMSE, SSIM and PSNR against ground truth")
    p.add_argument("recs", nargs="+", metavar="LABEL=STEM", help="reconstructions in report order")
    p.add_argument("--gt", required=True, help="ground truth stem")
    p.add_argument("--mask", help="mask stem (default: whole volume)")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("slice", parents=[common], help="export one slice as a PGM image")
    p.add_argument("volume", help="volume stem")
    p.add_argument("--axis", choices=("x", "y", "z"), required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--window", type=_window, required=True, metavar="LO,HI",
                   help="display range; write --window=-0.5,0.5 when lo is negative")
    p.add_argument("--out", required=True, help="PGM path")
    p.set_defaults(func=cmd_slice)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"patchqsm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, VolumeFormatError, DivergenceError, ValueError, OSError) as exc:
        print(f"patchqsm: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
