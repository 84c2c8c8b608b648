"""Scenario configuration files.

A scenario is a YAML key tree (see ``docs/config.md``).  Parsing keeps the line
of every node so validation errors point at the offending line.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .measures import MaturityGrid, SignedMeasure
from .noise import TimeGrid
from .termstructure import ExampleCoefficientSpec, Loading, TestFunction, VolTerm

QUARTER = 0.25


class ConfigError(ValueError):
    """Invalid scenario; the message carries ``file:line: key: reason``."""


def bundled_scenarios() -> list[str]:
    root = resources.files("cylhjm") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(name: str | Path) -> Path:
    """A file path, or the name of a bundled scenario."""
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("cylhjm") / "scenarios" / f"{name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"{name}: no such file or bundled scenario ({', '.join(bundled_scenarios())})")


def _line_map(node, path=(), out=None) -> dict:
    """Map key paths to 1-based line numbers of their YAML nodes."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            _line_map(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            _line_map(value, path + (i,), out)
    return out


class _Reader:
    """Typed access into the parsed tree with line-referenced errors."""

    def __init__(self, data: Any, lines: dict, source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def error(self, path: tuple, message: str) -> ConfigError:
        line = None
        for k in range(len(path), -1, -1):
            key = tuple(str(p) if not isinstance(p, int) else p for p in path[:k])
            if key in self.lines:
                line = self.lines[key]
                break
        where = ".".join(str(p) for p in path) or "<root>"
        return ConfigError(f"{self.source}:{line if line is not None else '?'}: {where}: {message}")

    def get(self, path: tuple, default: Any = ...) -> Any:
        node = self.data
        for p in path:
            if isinstance(node, dict) and p in node:
                node = node[p]
            elif isinstance(node, list) and isinstance(p, int) and p < len(node):
                node = node[p]
            else:
                if default is ...:
                    raise self.error(path, "required key is missing")
                return default
        return node

    def number(self, path: tuple, default: Any = ..., *, positive=False, nonneg=False) -> float:
        raw = self.get(path, default)
        if raw is None:
            return None
        value = self._to_float(path, raw)
        if positive and not value > 0:
            raise self.error(path, f"must be positive, got {raw!r}")
        if nonneg and value < 0:
            raise self.error(path, f"must be nonnegative, got {raw!r}")
        return value

    def integer(self, path: tuple, default: Any = ..., *, minimum: int | None = None) -> int:
        raw = self.get(path, default)
        value = self._to_float(path, raw)
        if value != int(value):
            raise self.error(path, f"must be an integer, got {raw!r}")
        value = int(value)
        if minimum is not None and value < minimum:
            raise self.error(path, f"must be at least {minimum}, got {value}")
        return value

    def numbers(self, path: tuple, default: Any = ...) -> list[float]:
        raw = self.get(path, default)
        if raw is None:
            return None
        if not isinstance(raw, list):
            raise self.error(path, "expected a list of numbers")
        return [self._to_float(path + (i,), v) for i, v in enumerate(raw)]

    def _to_float(self, path, raw) -> float:
        if isinstance(raw, bool):
            raise self.error(path, f"expected a number, got {raw!r}")
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise self.error(path, f"expected a number, got {raw!r}") from None
        if not math.isfinite(value):
            raise self.error(path, f"must be finite, got {raw!r}")
        return value


@dataclass
class ScenarioConfig:
    name: str
    grid: MaturityGrid
    time: TimeGrid
    d: int
    n_paths: int
    seed: int
    workers: int
    x0: SignedMeasure
    x0_energy: SignedMeasure
    coefficients: ExampleCoefficientSpec
    drift_offset: SignedMeasure | None
    maturities: list[float]
    buckets: list[tuple[float, float]]
    checkpoints: list[float]
    output: str
    checks: dict = field(default_factory=dict)
    scenario_hash: str = ""
    source: str = "<string>"

    @property
    def horizon(self) -> float:
        return self.time.horizon

    @property
    def checkpoint_steps(self) -> list[int]:
        return [self.time.step_of(t) for t in self.checkpoints]

    def section(self, name: str) -> "_Section":
        return _Section(self.checks.get(name) or {}, self.source, name)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        out = ScenarioConfig(**{**self.__dict__})
        for key, value in kw.items():
            if value is not None:
                setattr(out, key, value)
        return out


class _Section(_Reader):
    """Per-subcommand parameters under ``checks.<name>``."""

    def __init__(self, data: dict, source: str, name: str):
        super().__init__(data, {}, source)
        self.name = name

    def error(self, path, message):
        where = ".".join(("checks", self.name) + tuple(str(p) for p in path))
        return ConfigError(f"{self.source}: {where}: {message}")


def scenario_hash(data: Any) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> ScenarioConfig:
    path = resolve_config_path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, source=str(path), default_name=path.stem)


def parse_config(text: str, source: str = "<string>", default_name: str = "scenario") -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: <root>: expected a mapping of sections")
    r = _Reader(data, _line_map(node), source)
    return _build(r, default_name)


def _measure(r: _Reader, path: tuple, grid: MaturityGrid) -> SignedMeasure:
    raw = r.get(path, None)
    if raw is None:
        return SignedMeasure.zero(grid)
    if not isinstance(raw, dict):
        raise r.error(path, "a measure is a mapping with 'atoms' and/or 'density'")
    unknown = set(raw) - {"atoms", "density", "support", "cell_width", "n_cells"}
    if unknown:
        raise r.error(path, f"unknown measure keys {sorted(unknown)}")
    if "cell_width" in raw or "n_cells" in raw:
        own = (r.number(path + ("cell_width",)), r.integer(path + ("n_cells",)))
        if abs(own[0] - grid.cell_width) > grid.tol or own[1] != grid.n_cells:
            raise r.error(path, "measure grid differs from the scenario grid")
    atoms = []
    for i, atom in enumerate(r.get(path + ("atoms",), []) or []):
        if not isinstance(atom, list) or len(atom) != 2:
            raise r.error(path + ("atoms", i), "an atom is a [location, weight] pair")
        x = r.number(path + ("atoms", i, 0))
        w = r.number(path + ("atoms", i, 1))
        if not grid.tol < x <= grid.window + grid.tol:
            raise r.error(path + ("atoms", i), f"atom location {x} outside (0, {grid.window}]")
        atoms.append((x, w))
    dens_raw = r.get(path + ("density",), 0.0)
    if isinstance(dens_raw, list):
        density = np.array(r.numbers(path + ("density",)))
        if density.size != grid.n_cells:
            raise r.error(path + ("density",), f"expected {grid.n_cells} cell values, got {density.size}")
        if "support" in raw:
            raise r.error(path + ("support",), "support only applies to a scalar density")
    else:
        value = r.number(path + ("density",), 0.0)
        a, b = _interval(r, path + ("support",), grid, (0.0, grid.window))
        density = np.zeros(grid.n_cells)
        density[grid.cells(a) : grid.cells(b)] = value
    return SignedMeasure(grid, atoms, density)


def _aligned(r: _Reader, path: tuple, grid: MaturityGrid, x: float) -> float:
    if not grid.is_aligned(x):
        raise r.error(path, f"{x} is not a grid point (cell width {grid.cell_width})")
    return x


def _interval(r, path, grid, default) -> tuple[float, float]:
    raw = r.get(path, None)
    if raw is None:
        return default
    vals = r.numbers(path)
    if len(vals) != 2 or not 0 <= vals[0] <= vals[1] <= grid.window + grid.tol:
        raise r.error(path, f"expected [a, b] with 0 <= a <= b <= {grid.window}")
    return tuple(_aligned(r, path + (i,), grid, v) for i, v in enumerate(vals))


def _test_function(r: _Reader, path: tuple, grid: MaturityGrid) -> TestFunction:
    raw = r.get(path)
    if not isinstance(raw, dict):
        raise r.error(path, "a test function is a mapping ('indicator' or 'cell_values')")
    if "indicator" in raw:
        a, b = _interval(r, path + ("indicator",), grid, None)
        return TestFunction.indicator(grid, a, b)
    if "cell_values" not in raw:
        raise r.error(path, "test function needs 'indicator' or 'cell_values'")
    cv = raw["cell_values"]
    if isinstance(cv, list):
        values = np.array(r.numbers(path + ("cell_values",)))
        if values.size != grid.n_cells:
            raise r.error(path + ("cell_values",), f"expected {grid.n_cells} cell values")
    else:
        values = np.full(grid.n_cells, r.number(path + ("cell_values",)))
    points = r.get(path + ("point_values",), None)
    if points is not None:
        if not isinstance(points, dict):
            raise r.error(path + ("point_values",), "expected a mapping location -> value")
        points = {
            r._to_float(path + ("point_values",), k): r.number(path + ("point_values", k))
            for k in points
        }
    return TestFunction(values, points)


def _factors(r: _Reader, path: tuple, grid: MaturityGrid, n_functionals: int):
    raw = r.get(path, None)
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise r.error(path, "expected a list of factors, each a list of terms")
    factors = []
    for k, terms in enumerate(raw):
        if not isinstance(terms, list):
            raise r.error(path + (k,), "a factor is a list of {base, loading} terms")
        out = []
        for t, _ in enumerate(terms):
            tp = path + (k, t)
            base = _measure(r, tp + ("base",), grid)
            lp = tp + ("loading",)
            slopes = r.numbers(lp + ("slopes",), [])
            if slopes and len(slopes) != n_functionals:
                raise r.error(lp + ("slopes",), f"{len(slopes)} slopes for {n_functionals} functionals")
            loading = Loading(
                r.number(lp + ("intercept",), 1.0),
                tuple(slopes),
                r.number(lp + ("saturation",), 1.0, positive=True),
            )
            out.append(VolTerm(base, loading))
        factors.append(out)
    return factors


_SECTIONS = {
    "name", "grid", "time", "driver", "initial", "volatility",
    "maturities", "buckets", "checkpoints", "output", "checks",
}


def _build(r: _Reader, default_name: str) -> ScenarioConfig:
    unknown = set(r.data) - _SECTIONS
    if unknown:
        key = sorted(unknown)[0]
        raise r.error((key,), f"unknown section (expected one of {sorted(_SECTIONS)})")
    grid = MaturityGrid(
        r.number(("grid", "cell_width"), positive=True),
        r.integer(("grid", "n_cells"), minimum=1),
    )
    dt = r.number(("time", "dt"), grid.cell_width, positive=True)
    if abs(dt - grid.cell_width) > 1e-12 * grid.cell_width:
        raise r.error(("time", "dt"), f"dt must equal the cell width {grid.cell_width}")
    time = TimeGrid(grid.cell_width, r.integer(("time", "n_steps"), minimum=1))
    horizon = time.horizon

    n_fun = len(r.get(("volatility", "functionals"), []) or [])
    functionals = [_test_function(r, ("volatility", "functionals", i), grid) for i in range(n_fun)]
    rates = _factors(r, ("volatility", "rates"), grid, n_fun)
    energy = _factors(r, ("volatility", "energy"), grid, n_fun)
    d_default = len(rates) if rates else 1
    d = r.integer(("driver", "d"), d_default, minimum=1)
    if rates is None:
        rates = [[] for _ in range(d)]
    elif len(rates) != d:
        raise r.error(("driver", "d"), f"{d} factors requested but volatility.rates lists {len(rates)}")
    if energy is not None and len(energy) > d:
        raise r.error(("volatility", "energy"), f"more energy factors than driver factors ({d})")
    coefficients = ExampleCoefficientSpec(grid, functionals, rates, energy)
    drift_offset = None
    if r.get(("volatility", "drift_offset"), None) is not None:
        drift_offset = _measure(r, ("volatility", "drift_offset"), grid)

    def grid_list(key, default, upper, what):
        values = r.numbers((key,), None)
        if values is None:
            return default
        for i, x in enumerate(values):
            _aligned(r, (key, i), grid, x)
            if not 0 <= x <= upper + grid.tol:
                raise r.error((key, i), f"{what} {x} outside [0, {upper}]")
        return values

    max_mat = grid.window - horizon
    maturities = grid_list("maturities", [m for m in quarters(max_mat) if grid.is_aligned(m)], max_mat, "maturity")
    if maturities and max(maturities) + horizon > grid.window + grid.tol:
        raise r.error(("maturities",), "horizon + max maturity exceeds the maturity window")
    default_checkpoints = [c for c in quarters(horizon) if _on_time_grid(time, c)]
    checkpoints = grid_list("checkpoints", default_checkpoints, horizon, "checkpoint")
    for i, c in enumerate(checkpoints):
        if not _on_time_grid(time, c):
            raise r.error(("checkpoints", i), f"{c} is not a simulation time")

    raw_buckets = r.get(("buckets",), None)
    if raw_buckets is None:
        buckets = [(q - QUARTER, q) for q in quarters(grid.window) if grid.is_aligned(q - QUARTER) and grid.is_aligned(q)]
    else:
        if not isinstance(raw_buckets, list):
            raise r.error(("buckets",), "expected a list of [T1, T2] pairs")
        buckets = [_interval(r, ("buckets", i), grid, None) for i in range(len(raw_buckets))]

    checks = r.get(("checks",), {}) or {}
    if not isinstance(checks, dict):
        raise r.error(("checks",), "expected a mapping of per-subcommand parameters")
    return ScenarioConfig(
        name=str(r.get(("name",), default_name)),
        grid=grid,
        time=time,
        d=d,
        n_paths=r.integer(("driver", "n_paths"), 256, minimum=1),
        seed=r.integer(("driver", "seed"), 0, minimum=0),
        workers=r.integer(("driver", "workers"), 1, minimum=1),
        x0=_measure(r, ("initial", "rates"), grid),
        x0_energy=_measure(r, ("initial", "energy"), grid),
        coefficients=coefficients,
        drift_offset=drift_offset,
        maturities=[float(m) for m in maturities],
        buckets=[(float(a), float(b)) for a, b in buckets],
        checkpoints=[float(c) for c in checkpoints],
        output=str(r.get(("output",), "out")),
        checks=checks,
        scenario_hash=scenario_hash(r.data),
        source=r.source,
    )


def quarters(upper: float) -> list[float]:
    """Quarterly grid ``0.25, 0.5, ...`` up to ``upper``."""
    return [float(q) for q in np.arange(1, int(upper / QUARTER + 1e-9) + 1) * QUARTER]


def _on_time_grid(time: TimeGrid, t: float) -> bool:
    try:
        time.step_of(t)
    except ValueError:
        return False
    return True
