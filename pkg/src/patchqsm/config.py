"""Run configuration: INI sections mapped onto the module config types.

Example::

    [run]
    seed = 42

    [phantom]
    dims = 48, 48, 48
    sphere1.center = 17, 22, 24
    sphere1.radius = 6
    sphere1.chi = 0.5

    [noise]
    sigma = 0.01

    [tv]
    lam = 3e-3
    grid = 1e-3, 3e-3, 1e-2

Unknown sections and keys are errors. Shapes are numbered ``sphereN`` or
``cuboidN`` and painted in order of first appearance. Seeds left unset are
derived from ``[run] seed`` by labeled sub-seeding, so one number controls
every random stream.
"""
from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import SolverConfigError, TgvConfig, TkdConfig, TvConfig
from .neural import NetworkSpec
from .pdip import PdipConfig
from .phantom import Cuboid, NoiseSpec, PhantomSpec, Sphere, desk_phantom


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration value."""


_SCHEMA = {
    "run": {"seed"},
    "phantom": {"dims", "spacing", "background", "mask_radius"},
    "noise": {"sigma", "seed"},
    "tkd": {"threshold", "grid"},
    "tv": {"lam", "iterations", "tau", "sigma", "grid"},
    "tgv": {"alpha1", "alpha0", "iterations", "tau", "sigma", "grid"},
    "pdip": {"mu", "patch", "stride", "outer_iters", "inner_epochs", "lr", "tol",
             "seed", "init", "grid"},
    "net": {"levels", "base_channels", "slope"},
    "metrics": {"data_range"},
}
_SHAPE_KEYS = {"sphere": ("center", "radius", "chi"), "cuboid": ("corner", "size", "chi")}


def derive_seed(seed: int, label: str) -> int:
    """Child seed for the consumer named ``label``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1, np.uint64)[0])


def _where(section, key):
    return f"[{section}] {key}"


def _parse(text, cast, section, key):
    try:
        return cast(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{_where(section, key)}: cannot parse {text!r} as {cast.__name__}") from exc


def _parse_list(text, cast, section, key, length=None):
    parts = [p for p in (s.strip() for s in text.split(",")) if p]
    if length is not None and len(parts) != length:
        raise ConfigError(f"{_where(section, key)}: expected {length} comma-separated values, got {text!r}")
    if not parts:
        raise ConfigError(f"{_where(section, key)}: empty list")
    return tuple(_parse(p, cast, section, key) for p in parts)


def _triple_or_scalar(text, cast, section, key):
    vals = _parse_list(text, cast, section, key)
    if len(vals) == 1:
        return vals * 3
    if len(vals) != 3:
        raise ConfigError(f"{_where(section, key)}: expected one or three values, got {text!r}")
    return vals


def _seed(text, section, key):
    value = _parse(text, int, section, key)
    if not 0 <= value < 2**64:
        raise ConfigError(f"{_where(section, key)}: seed must be an unsigned 64-bit integer")
    return value


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=desk_phantom)
    noise_sigma: float = 0.0
    noise_seed: int | None = None  # None: derived from ``seed``
    tkd: TkdConfig = TkdConfig()
    tv: TvConfig = TvConfig()
    tgv: TgvConfig = TgvConfig()
    pdip: PdipConfig = PdipConfig()
    pdip_seed_set: bool = False
    net: NetworkSpec = NetworkSpec()
    grids: dict = field(default_factory=dict)  # method -> search values
    data_range: float | None = None

    def noise(self) -> NoiseSpec:
        seed = self.noise_seed if self.noise_seed is not None else derive_seed(self.seed, "noise")
        return NoiseSpec(self.noise_sigma, seed)

    def pdip_config(self) -> PdipConfig:
        if self.pdip_seed_set:
            return self.pdip
        return replace(self.pdip, seed=derive_seed(self.seed, "pdip"))


def read_parser(path=None, overrides=()) -> configparser.ConfigParser:
    """Parse ``path`` (optional) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())
    return parser


def _check_keys(parser):
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key in _SCHEMA[section]:
                continue
            if section == "phantom" and _shape_key(key) is not None:
                continue
            raise ConfigError(f"unknown key {_where(section, key)}")


def _shape_key(key):
    label, dot, attr = key.partition(".")
    for kind, attrs in _SHAPE_KEYS.items():
        if dot and label.startswith(kind) and label[len(kind):].isdigit() and attr in attrs:
            return kind, label, attr
    return None


def _phantom(sec) -> PhantomSpec:
    base = desk_phantom()
    if sec is None:
        return base
    dims = _triple_or_scalar(sec["dims"], int, "phantom", "dims") if "dims" in sec else base.dims
    spacing = (_triple_or_scalar(sec["spacing"], float, "phantom", "spacing")
               if "spacing" in sec else base.spacing)
    background = _parse(sec["background"], float, "phantom", "background") if "background" in sec else 0.0
    mask_radius = (_parse(sec["mask_radius"], float, "phantom", "mask_radius")
                   if "mask_radius" in sec else None)
    if min(dims) < 1 or min(spacing) <= 0:
        raise ConfigError("[phantom] dims and spacing must be positive")

    found = {}
    for key, value in sec.items():
        parsed = _shape_key(key)
        if parsed is not None:
            kind, label, attr = parsed
            found.setdefault(label, (kind, {}))[1][attr] = (key, value)
    shapes = []
    for label, (kind, attrs) in found.items():
        missing = [a for a in _SHAPE_KEYS[kind] if a not in attrs]
        if missing:
            raise ConfigError(f"[phantom] {label} is missing {', '.join(missing)}")
        vals = {}
        for attr, (key, text) in attrs.items():
            if attr in ("center", "corner", "size"):
                vals[attr] = _parse_list(text, float, "phantom", key, 3)
            else:
                vals[attr] = _parse(text, float, "phantom", key)
        try:
            shapes.append(Sphere(**vals) if kind == "sphere" else Cuboid(**vals))
        except ValueError as exc:
            raise ConfigError(f"[phantom] {label}: {exc}") from exc
    if not shapes and tuple(dims) == base.dims:
        shapes = list(base.shapes)
    return PhantomSpec(tuple(dims), tuple(spacing), tuple(shapes), background, mask_radius)


def _fields(sec, section, casts):
    out = {}
    if sec is None:
        return out
    for key, cast in casts.items():
        if key in sec:
            out[key] = cast(sec[key], section, key)
    return out


def _num(cast):
    return lambda text, section, key: _parse(text, cast, section, key)


def _grid(sec, section):
    if sec is None or "grid" not in sec:
        return None
    return sorted(_parse_list(sec["grid"], float, section, "grid"))


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Build a :class:`RunConfig`; ``seed`` (if given) overrides ``[run] seed``."""
    parser = read_parser(path, overrides)
    _check_keys(parser)

    def sec(name):
        return parser[name] if parser.has_section(name) else None

    run_seed = _seed(sec("run")["seed"], "run", "seed") if sec("run") and "seed" in sec("run") else 0
    if seed is not None:
        run_seed = _seed(str(seed), "run", "seed")

    noise = _fields(sec("noise"), "noise", {"sigma": _num(float), "seed": _seed})
    grids = {m: g for m in ("tkd", "tv", "tgv", "pdip") if (g := _grid(sec(m), m)) is not None}

    try:
        tkd = TkdConfig(**_fields(sec("tkd"), "tkd", {"threshold": _num(float)}))
        tv = TvConfig(**_fields(sec("tv"), "tv", {
            "lam": _num(float), "iterations": _num(int), "tau": _num(float), "sigma": _num(float)}))
        tgv = TgvConfig(**_fields(sec("tgv"), "tgv", {
            "alpha1": _num(float), "alpha0": _num(float), "iterations": _num(int),
            "tau": _num(float), "sigma": _num(float)}))
        pd = _fields(sec("pdip"), "pdip", {
            "mu": _num(float), "outer_iters": _num(int), "inner_epochs": _num(int),
            "lr": _num(float), "tol": _num(float), "seed": _seed,
            "init": lambda t, s, k: t.strip(),
            "patch": lambda t, s, k: _triple_or_scalar(t, int, s, k),
            "stride": lambda t, s, k: _triple_or_scalar(t, int, s, k)})
        pdip = PdipConfig(**pd)
        net = NetworkSpec(**_fields(sec("net"), "net", {
            "levels": _num(int), "base_channels": _num(int), "slope": _num(float)}))
        noise_sigma = noise.get("sigma", 0.0)
        NoiseSpec(noise_sigma)
    except ConfigError:
        raise
    except (SolverConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    data_range = None
    if sec("metrics") and "data_range" in sec("metrics"):
        data_range = _parse(sec("metrics")["data_range"], float, "metrics", "data_range")
        if data_range <= 0:
            raise ConfigError("[metrics] data_range must be positive")

    return RunConfig(
        seed=run_seed,
        phantom=_phantom(sec("phantom")),
        noise_sigma=noise_sigma,
        noise_seed=noise.get("seed"),
        tkd=tkd,
        tv=tv,
        tgv=tgv,
        pdip=pdip,
        pdip_seed_set="seed" in pd,
        net=net,
        grids=grids,
        data_range=data_range,
    )
