"""Run configuration: YAML file + dotted-key overrides -> validated RunConfig.

Every error raised while loading is a ConfigError that names the file and
line of the offending key when it came from the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .deviation import RepresentingPair
from .drivers import Driver, build_driver
from .jumps import LevyMeasure
from .market import MarketModel

WORKERS_ENV = "DYNAMIC_DEVIATION_WORKERS"


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


def _vector(value: Any) -> List[float]:
    array = np.atleast_1d(np.asarray(value, dtype=float))
    if array.ndim != 1:
        raise ValueError(f"expected a list of numbers, got {value!r}")
    return array.tolist()


def _matrix(value: Any) -> List[List[float]]:
    array = np.atleast_2d(np.asarray(value, dtype=float))
    if array.ndim != 2:
        raise ValueError(f"expected a matrix (list of rows), got {value!r}")
    return array.tolist()


def _rows(value: Any) -> List[List[float]]:
    if value is None or value == []:
        return []
    return _matrix(value)


def _ints(value: Any) -> List[int]:
    return [int(v) for v in np.atleast_1d(value)]


def _optional(convert: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda value: None if value is None else convert(value)


def _spec(default: Any = None, convert: Callable[[Any], Any] = float, required: bool = False):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"convert": convert, "required": required})
    return field(default=default, metadata={"convert": convert, "required": required})


@dataclass(frozen=True)
class MarketBlock:
    r: float = _spec(required=True)
    mu: List[float] = _spec(convert=_vector, required=True)
    sigma: List[List[float]] = _spec(convert=_matrix, required=True)
    R: List[List[float]] = _spec(convert=_matrix, required=True)
    atoms: List[List[float]] = _spec([], convert=_rows)


@dataclass(frozen=True)
class DriverBlock:
    kind: str = _spec("joint_norm", convert=str)
    lam: float = _spec(1.0)
    c: Optional[float] = _spec(convert=_optional(float))
    d: Optional[float] = _spec(convert=_optional(float))
    a: Optional[float] = _spec(convert=_optional(float))

    def params(self) -> Dict[str, float]:
        return {k: v for k, v in (("lam", self.lam), ("c", self.c), ("d", self.d), ("a", self.a)) if v is not None}


@dataclass(frozen=True)
class ProblemBlock:
    gamma: float = _spec(required=True)
    T: float = _spec(required=True)
    x0: float = _spec(1.0)

    def __post_init__(self):
        if self.gamma <= 0.0 or self.T <= 0.0 or self.x0 <= 0.0:
            raise ValueError(f"gamma, T and x0 must be positive, got {self.gamma}, {self.T}, {self.x0}")


@dataclass(frozen=True)
class NumericsBlock:
    grid_size: int = _spec(4096, convert=int)
    tol: float = _spec(1e-10)
    max_iter: int = _spec(500, convert=int)
    damping: float = _spec(0.5)
    n_paths: int = _spec(100000, convert=int)
    seed: int = _spec(42, convert=int)
    workers: int = _spec(1, convert=int)

    def __post_init__(self):
        if self.grid_size < 64:
            raise ValueError(f"grid_size must be >= 64, got {self.grid_size}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.n_paths < 1 or self.max_iter < 1 or self.workers < 1:
            raise ValueError("n_paths, max_iter and workers must be >= 1")


@dataclass(frozen=True)
class OutputBlock:
    directory: str = _spec("results", convert=str)
    formats: List[str] = _spec(["csv", "json"], convert=lambda v: [str(x) for x in np.atleast_1d(v)])

    def __post_init__(self):
        unknown = set(self.formats) - {"csv", "json"}
        if unknown:
            raise ValueError(f"unknown output formats {sorted(unknown)} (expected csv, json)")


@dataclass(frozen=True)
class PairBlock:
    """A representing pair for the deviation and convergence subcommands."""

    grid: List[float] = _spec(convert=_vector, required=True)
    f: List[List[float]] = _spec(convert=_matrix, required=True)
    g: List[List[float]] = _spec([], convert=_rows)
    atoms: List[List[float]] = _spec([], convert=_rows)
    alpha: float = _spec(0.05)
    levels: List[int] = _spec([2, 4, 6, 8, 10], convert=_ints)
    samples_per_cell: int = _spec(20000, convert=int)
    times: List[float] = _spec([], convert=lambda v: [] if v is None else _vector(v))


@dataclass(frozen=True)
class ChecksBlock:
    """Settings of the hjb-check and validate subcommands."""

    hjb_x: List[float] = _spec([0.5, 1.0, 2.0], convert=_vector)
    perturbation_times: List[float] = _spec([], convert=lambda v: [] if v is None else _vector(v))
    perturbation_heads: List[List[float]] = _spec([], convert=_rows)
    h_step: Optional[float] = _spec(convert=_optional(float))


BLOCKS: Dict[str, type] = {
    "market": MarketBlock,
    "driver": DriverBlock,
    "problem": ProblemBlock,
    "numerics": NumericsBlock,
    "output": OutputBlock,
    "pair": PairBlock,
    "checks": ChecksBlock,
}


@dataclass(frozen=True)
class RunConfig:
    market: Optional[MarketBlock] = None
    driver: DriverBlock = field(default_factory=DriverBlock)
    problem: Optional[ProblemBlock] = None
    numerics: NumericsBlock = field(default_factory=NumericsBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    pair: Optional[PairBlock] = None
    checks: ChecksBlock = field(default_factory=ChecksBlock)
    source: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("source")
        return data

    def require(self, *blocks: str) -> None:
        missing = [name for name in blocks if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"this command needs the config block(s) {', '.join(missing)}", source=self.source)

    def market_model(self) -> MarketModel:
        self.require("market")
        try:
            return MarketModel.from_config(self.market)
        except ValueError as exc:
            raise ConfigError(f"invalid market: {exc}", source=self.source) from exc

    def pair_measure(self) -> LevyMeasure:
        self.require("pair")
        try:
            return LevyMeasure.from_rows(self.pair.atoms, dimension=None if self.pair.atoms else 1)
        except ValueError as exc:
            raise ConfigError(f"invalid pair: {exc}", source=self.source) from exc

    def representing_pair(self) -> RepresentingPair:
        measure = self.pair_measure()
        block = self.pair
        try:
            return RepresentingPair(np.asarray(block.grid), np.asarray(block.f), np.asarray(block.g), measure)
        except ValueError as exc:
            raise ConfigError(f"invalid pair: {exc}", source=self.source) from exc

    def build_driver(self, measure: LevyMeasure) -> Driver:
        try:
            return build_driver(self.driver.kind, measure, **self.driver.params())
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid driver {self.driver.kind!r}: {exc}", source=self.source) from exc

    def validate(self) -> "RunConfig":
        """Build the market, pair and driver once so invalid blocks fail at load time."""
        measure = LevyMeasure.empty(1)
        if self.pair is not None:
            measure = self.representing_pair().measure
        if self.market is not None:
            measure = self.market_model().measure
        self.build_driver(measure)
        return self


def default_config() -> Dict[str, Any]:
    """Defaults of every block that has them, as a plain mapping."""
    return RunConfig().to_dict()


# ---------------------------------------------------------------- loading


def _line_index(node: yaml.Node, prefix: Tuple[str, ...] = ()) -> Dict[Tuple[str, ...], int]:
    """Map dotted key paths of a composed YAML mapping to 1-based line numbers."""
    lines: Dict[Tuple[str, ...], int] = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (str(key.value),)
            lines[path] = key.start_mark.line + 1
            lines.update(_line_index(value, path))
    return lines


def _parse_override(text: str) -> Tuple[Tuple[str, ...], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form block.key=value")
    key, raw = text.split("=", 1)
    path = tuple(part.strip() for part in key.split("."))
    if len(path) != 2 or not all(path):
        raise ConfigError(f"override {text!r} must name block.key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value ({exc})") from exc
    return path, value


def _build_block(name: str, raw: Any, lines: Dict[Tuple[str, ...], int], source: Optional[str]):
    cls = BLOCKS[name]
    block_line = lines.get((name,))
    if not isinstance(raw, dict):
        raise ConfigError(f"block '{name}' must be a mapping", block_line, source)
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in {name}", lines.get((name, key), block_line), source)
    values = {}
    for key, spec in known.items():
        line = lines.get((name, key), block_line)
        if key not in raw:
            if spec.metadata.get("required"):
                raise ConfigError(f"missing required key '{key}' in {name}", block_line, source)
            continue
        try:
            values[key] = spec.metadata["convert"](raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}.{key}: {exc}", line, source) from exc
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"invalid {name}: {exc}", block_line, source) from exc


def load_config(
    path: Optional[str | Path] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """Load a YAML config, apply ``block.key=value`` overrides and the workers env var."""
    environ = os.environ if environ is None else environ
    source = str(path) if path is not None else None
    raw: Dict[str, Any] = {}
    lines: Dict[Tuple[str, ...], int] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", source=source) from exc
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {exc}", mark.line + 1 if mark else None, source) from exc
        if not isinstance(raw, dict):
            raise ConfigError("top level of the config must be a mapping", 1, source)
        if node is not None:
            lines = _line_index(node)

    for name in raw:
        if name not in BLOCKS:
            raise ConfigError(f"unknown block '{name}'", lines.get((name,)), source)

    for text in overrides:
        (block, key), value = _parse_override(text)
        if block not in BLOCKS:
            raise ConfigError(f"override {text!r}: unknown block '{block}'")
        section = raw.setdefault(block, {})
        if not isinstance(section, dict):
            raise ConfigError(f"override {text!r}: block '{block}' is not a mapping")
        section[key] = value

    if environ.get(WORKERS_ENV):
        raw.setdefault("numerics", {})["workers"] = environ[WORKERS_ENV]

    blocks = {name: _build_block(name, section, lines, source) for name, section in raw.items()}
    return RunConfig(source=source, **blocks).validate()
