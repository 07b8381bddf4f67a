"""Run configuration: an INI file with [model], [sim], [mc], [error], [cutoff] and [output] sections.

Example::

    [model]
    name = scalar-sin
    gamma0 = 2.0

    [sim]
    T = 1.0
    hbar = 0.01
    masses = 0.125, 6, 2      ; m0, count, ratio (ratio optional, default 2)
    levels = 2

    [mc]
    paths = 2000
    seed = 20240601

Every key except ``name`` in [model] is passed to the model factory.
"""

from __future__ import annotations

import ast
import configparser
import re
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .models import GALLERY

REQUIRED = ("model.name", "sim.T", "sim.hbar", "sim.masses", "sim.levels", "mc.paths", "mc.seed")
SCHEMES = ("exp", "em", "milstein")
FAST_PATHS = ("auto", "off", "scalar", "const-gamma", "fluct-diss")
REFERENCES = ("exp", "exp-mid", "em")


@dataclass
class RunConfig:
    model: str
    T: float
    hbar: float
    m0: float
    count: int
    levels: int
    paths: int
    seed: int
    model_params: dict = field(default_factory=dict)
    ratio: int = 2
    scheme: str = "exp"
    reference: str = "exp-mid"
    fast_path: str = "auto"
    z0: list | None = None
    q0: list | None = None
    p: float = 2.0
    chunk: int = 250
    cutoff_r: float | None = None
    delta: float = 1.0
    eps: float = 0.1
    cutoff_level: int | None = None
    out_dir: str = "out"
    out_format: str = "csv"

    def __post_init__(self):
        checks = [
            (self.T > 0, "sim.T", "must be positive"),
            (0 < self.hbar <= 0.05, "sim.hbar", "must lie in (0, 0.05]"),
            (self.m0 > 0, "sim.masses", "m0 must be positive"),
            (self.count >= 1, "sim.masses", "count must be >= 1"),
            (int(self.ratio) == self.ratio and self.ratio >= 2, "sim.masses", "ratio must be an integer >= 2"),
            (self.levels >= 1, "sim.levels", "must be >= 1"),
            (self.paths >= 1, "mc.paths", "must be >= 1"),
            (self.chunk >= 1, "mc.chunk", "must be >= 1"),
            (self.p >= 1, "error.p", "must be >= 1"),
            (self.scheme in SCHEMES, "sim.scheme", f"must be one of {SCHEMES}"),
            (self.reference in REFERENCES, "sim.reference", f"must be one of {REFERENCES}"),
            (self.fast_path in FAST_PATHS, "sim.fast_path", f"must be one of {FAST_PATHS}"),
            (self.model in GALLERY, "model.name", f"unknown model; choose from {sorted(GALLERY)}"),
            (self.cutoff_r is None or self.cutoff_r > 0, "cutoff.r", "must be positive"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        steps = self.T / (self.hbar * self.m0 * float(self.ratio) ** (1 - self.count))
        if abs(steps - round(steps)) > 1e-6 * steps:
            raise ConfigError("sim.T: T / (hbar * m) must be an integer for every mass in the family")

    @property
    def masses(self):
        return [self.m0 * float(self.ratio) ** (-j) for j in range(self.count)]

    @property
    def level_scheme(self):
        return "milstein" if self.scheme == "milstein" else "em"

    @property
    def ref_scheme(self):
        return "em" if self.scheme == "em" else self.reference

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig(**d)


def _literal(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off", "none"):
            return None if low == "none" else False
        return text


def _key_line(text, section, key):
    sect = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            sect = m.group(1).strip().lower()
        elif sect == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return lineno
    return None


def _vector(value, key):
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return [float(value)]
    try:
        return [float(v) for v in value]
    except TypeError:
        raise ConfigError(f"{key}: expected a number or a list of numbers") from None


_FIELDS = {
    # key -> (field name, converter)
    "sim.t": ("T", float),
    "sim.hbar": ("hbar", float),
    "sim.levels": ("levels", int),
    "sim.scheme": ("scheme", str),
    "sim.reference": ("reference", str),
    "sim.fast_path": ("fast_path", str),
    "sim.z0": ("z0", "vector"),
    "sim.q0": ("q0", "vector"),
    "mc.paths": ("paths", int),
    "mc.seed": ("seed", int),
    "mc.chunk": ("chunk", int),
    "error.p": ("p", float),
    "cutoff.r": ("cutoff_r", float),
    "cutoff.delta": ("delta", float),
    "cutoff.eps": ("eps", float),
    "cutoff.level": ("cutoff_level", int),
    "output.dir": ("out_dir", str),
    "output.format": ("out_format", str),
}


def parse_overrides(items):
    """``["sim.levels=3", ...]`` to a flat ``{"sim.levels": "3"}`` map."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        key = key.strip().lower()
        if "." not in key:
            raise ConfigError(f"override {item!r}: key must look like section.name")
        out[key] = value.strip()
    return out


def parse_config(text, overrides=None, source="<config>") -> RunConfig:
    """Parse INI text into a RunConfig; errors name the key and, where possible, the line."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lines = ", ".join(str(ln) for ln, _ in exc.errors)
        raise ConfigError(f"{source}: malformed line(s) {lines}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    flat = {}
    for sect in cp.sections():
        for key, value in cp.items(sect):
            flat[f"{sect.lower()}.{key}"] = value
    for key, value in (overrides or {}).items():
        flat[key.lower()] = value

    def where(key):
        sect, name = key.split(".", 1)
        line = _key_line(text, sect, name)
        return f"{source}:{line}: {key}" if line else f"{source}: {key}"

    for req in REQUIRED:
        if req.lower() not in flat:
            raise ConfigError(f"{source}: missing required key {req}")
    kwargs = {"model": flat["model.name"].strip(), "model_params": {}}
    for key, value in flat.items():
        sect, name = key.split(".", 1)
        if sect == "model":
            if name != "name":
                kwargs["model_params"][name] = _literal(value)
            continue
        if key == "sim.masses":
            parts = [p for p in re.split(r"[,\s]+", value.strip()) if p]
            try:
                nums = [float(p) for p in parts]
                if len(nums) not in (2, 3) or nums[1] != int(nums[1]):
                    raise ValueError
            except ValueError:
                raise ConfigError(f"{where(key)}: expected 'm0, count[, ratio]', got {value!r}") from None
            kwargs["m0"], kwargs["count"] = nums[0], int(nums[1])
            if len(nums) == 3:
                kwargs["ratio"] = nums[2]
            continue
        if key not in _FIELDS:
            raise ConfigError(f"{where(key)}: unknown key")
        fname, conv = _FIELDS[key]
        try:
            if conv == "vector":
                kwargs[fname] = _vector(_literal(value), key)
            elif conv is str:
                kwargs[fname] = value.strip()
            else:
                lit = _literal(value)
                if isinstance(lit, str) or isinstance(lit, bool):
                    raise ValueError
                if conv is int and float(lit) != int(lit):
                    raise ValueError
                kwargs[fname] = conv(lit)
        except (ValueError, TypeError):
            raise ConfigError(f"{where(key)}: cannot read {value!r} as {getattr(conv, '__name__', conv)}") from None
    if "ratio" in kwargs:
        kwargs["ratio"] = int(kwargs["ratio"]) if float(kwargs["ratio"]).is_integer() else kwargs["ratio"]
    try:
        return RunConfig(**kwargs)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        if "." in key:
            raise ConfigError(f"{where(key)}:{str(exc).split(':', 1)[1]}") from None
        raise


def load_config(path, overrides=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides, source=str(path))
