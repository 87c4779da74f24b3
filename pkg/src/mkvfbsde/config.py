"""Experiment configuration files.

A config is an INI-style file with four sections::

    [model]
    name = price_impact_pontryagin   ; any name in models.MODEL_NAMES
    d = 10                           ; other keys override model parameters

    [grid]
    T = 0.25
    N = 25                           ; or dt = 0.01, never both

    [solver]
    scheme = dynamic                 ; direct | dynamic | expectation | local
    batch_size = 200
    iterations = 2000
    seed = 0                         ; any SolverConfig field

    [output]
    dir = results/dyn-pont           ; default: $MKVFBSDE_OUTPUT_DIR or ./mkvfbsde-out
    repetitions = 1
    law_trajectory = true

Comments start with ``#`` or ``;``. Every error is reported as a
:class:`ConfigError` carrying the offending line number when one exists.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .models import MODEL_NAMES, PARAM_TYPES, ModelDefinition, build_model
from .sde import TimeGrid
from .solvers import SolverConfig

OUTPUT_ENV = "MKVFBSDE_OUTPUT_DIR"
DEFAULT_OUTPUT = "mkvfbsde-out"

SECTIONS = ("model", "grid", "solver", "output")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


@dataclass
class ExperimentConfig:
    model_name: str
    model_params: dict
    T: float
    N: int
    solver: SolverConfig
    output_dir: Path
    repetitions: int = 1
    law_trajectory: bool = False

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)

    def model(self) -> ModelDefinition:
        return build_model(self.model_name, self.T, **self.model_params)

    def to_dict(self) -> dict:
        return {
            "model": {"name": self.model_name, **self.model_params},
            "grid": {"T": self.T, "N": self.N},
            "solver": dataclasses.asdict(self.solver),
            "output": {
                "dir": str(self.output_dir),
                "repetitions": self.repetitions,
                "law_trajectory": self.law_trajectory,
            },
        }


class _Locator:
    """Maps (section, key) to the line it was written on."""

    _section = re.compile(r"^\s*\[([^\]]+)\]")
    _key = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")

    def __init__(self, text: str):
        self.sections: dict[str, int] = {}
        self.keys: dict[tuple[str, str], int] = {}
        current = None
        for n, line in enumerate(text.splitlines(), start=1):
            if m := self._section.match(line):
                current = m.group(1).strip().lower()
                self.sections.setdefault(current, n)
            elif current is not None and (m := self._key.match(line)):
                self.keys.setdefault((current, m.group(1).strip().lower()), n)

    def line(self, section: str, key: str | None = None) -> int | None:
        if key is not None and (section, key) in self.keys:
            return self.keys[(section, key)]
        return self.sections.get(section)


def _convert(raw: str, kind, where: str, line):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}", line) from None


def _field_kind(field: dataclasses.Field):
    t = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if t.startswith("int"):
        return int
    if t.startswith("float"):
        return float
    if t.startswith("bool"):
        return bool
    return str


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as err:
        raise ConfigError(f"{source}: key outside any section", err.lineno) from None
    except configparser.ParsingError as err:
        line = err.errors[0][0] if err.errors else None
        raise ConfigError(f"{source}: malformed line", line) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as err:
        raise ConfigError(f"{source}: {err.message if hasattr(err, 'message') else err}", err.lineno) from None
    loc = _Locator(text)

    for section in parser.sections():
        if section.lower() not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", loc.line(section.lower()))
    for section in ("model", "grid"):
        if not parser.has_section(section):
            raise ConfigError(f"missing section [{section}]")

    # model
    model = dict(parser.items("model"))
    name = model.pop("name", None)
    if not name:
        raise ConfigError("[model] needs a name", loc.line("model"))
    if name not in MODEL_NAMES:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}",
                          loc.line("model", "name"))
    kinds = {f.name.lower(): (f.name, _field_kind(f)) for f in dataclasses.fields(PARAM_TYPES[name])}
    params = {}
    for key, raw in model.items():
        if key not in kinds:
            raise ConfigError(f"unknown parameter {key!r} for model {name}", loc.line("model", key))
        field_name, kind = kinds[key]
        params[field_name] = _convert(raw, kind, f"[model] {key}", loc.line("model", key))

    # grid
    grid = dict(parser.items("grid"))
    for key in grid:
        if key not in ("t", "n", "dt"):
            raise ConfigError(f"unknown key {key!r} in [grid]", loc.line("grid", key))
    if "t" not in grid:
        raise ConfigError("[grid] needs T", loc.line("grid"))
    T = _convert(grid["t"], float, "[grid] T", loc.line("grid", "t"))
    if ("n" in grid) == ("dt" in grid):
        raise ConfigError("[grid] needs exactly one of N or dt", loc.line("grid"))
    try:
        if "n" in grid:
            tg = TimeGrid(T, _convert(grid["n"], int, "[grid] N", loc.line("grid", "n")))
        else:
            tg = TimeGrid.from_dt(T, _convert(grid["dt"], float, "[grid] dt", loc.line("grid", "dt")))
    except ConfigError as err:
        key = "n" if "n" in grid else "dt"
        raise ConfigError(err.message, loc.line("grid", key if key in grid else "t")) from None

    # solver
    solver_fields = {f.name: _field_kind(f) for f in dataclasses.fields(SolverConfig)}
    settings = {}
    if parser.has_section("solver"):
        for key, raw in parser.items("solver"):
            if key not in solver_fields:
                raise ConfigError(f"unknown solver setting {key!r}", loc.line("solver", key))
            if key == "hidden_width" and raw.strip().lower() in ("", "auto", "none"):
                continue
            kind = int if key == "hidden_width" else solver_fields[key]
            settings[key] = _convert(raw, kind, f"[solver] {key}", loc.line("solver", key))
    try:
        solver = SolverConfig(**settings)
    except ConfigError as err:
        bad = next((k for k in settings if k in err.message), None)
        raise ConfigError(err.message, loc.line("solver", bad)) from None

    # output
    out = dict(parser.items("output")) if parser.has_section("output") else {}
    for key in out:
        if key not in ("dir", "repetitions", "law_trajectory"):
            raise ConfigError(f"unknown key {key!r} in [output]", loc.line("output", key))
    reps = _convert(out.get("repetitions", "1"), int, "[output] repetitions", loc.line("output", "repetitions"))
    if reps < 1:
        raise ConfigError("repetitions must be positive", loc.line("output", "repetitions"))
    law = _convert(out.get("law_trajectory", "false"), bool, "[output] law_trajectory",
                   loc.line("output", "law_trajectory"))
    out_dir = Path(out["dir"]) if out.get("dir") else default_output_dir()

    exp = ExperimentConfig(name, params, tg.T, tg.N, solver, out_dir, reps, law)
    try:
        exp.model()
    except ConfigError as err:
        raise ConfigError(err.message, loc.line("model")) from None
    return exp


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text, str(path))
