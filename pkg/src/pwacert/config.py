"""Run configuration: a small TOML document validated before any compute."""
from __future__ import annotations

import hashlib
import importlib
import os
import sys
from importlib import resources
from pathlib import Path
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .synthesis import SynthesisConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateSpec:
    width: int = 8
    samples: int = 4000
    seed: int = 0
    epochs: int = 5000
    weights: str | None = None  # JSON file written by ReluNetwork.save


@dataclass(frozen=True)
class BudgetSpec:
    outer_iters: int = 8
    max_refinements: int = 10
    wall_clock_s: float | None = None
    restarts: int = 8
    verify_interior: bool = True


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "runs/out"
    emit_svg: bool = True
    emit_csv: bool = True


@dataclass(frozen=True)
class SimSpec:
    n_trajectories: int = 200
    horizon_s: float = 20.0
    dt: float = 1e-3
    seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    system: str
    alpha_grid: tuple
    surrogate: SurrogateSpec = SurrogateSpec()
    synthesis: SynthesisConfig = SynthesisConfig()
    budgets: BudgetSpec = BudgetSpec()
    outputs: OutputSpec = OutputSpec()
    sim: SimSpec = SimSpec()
    workers: int = 1
    source: str = field(default="", compare=False)
    digest: str = field(default="", compare=False)

    @property
    def threads(self) -> int:
        env = os.environ.get("PWACERT_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                raise ConfigError(f"PWACERT_THREADS must be an integer, got {env!r}") from None
        return self.workers

    def dynamics(self):
        from .dynamics import BUILTINS, builtin

        if self.system in BUILTINS:
            return builtin(self.system)
        module, _, attr = self.system.partition(":")
        factory = getattr(importlib.import_module(module), attr)
        return factory()


_TABLES = {
    "surrogate": SurrogateSpec,
    "budgets": BudgetSpec,
    "outputs": OutputSpec,
    "sim": SimSpec,
}
_TOP = {"system", "alpha_grid", "workers", "surrogate", "synthesis", "budgets", "outputs", "sim"}
_SYNTH = {f.name for f in fields(SynthesisConfig)} - {"alpha", "max_refinements"}


def _table(name, cls, raw, allowed=None):
    allowed = allowed or {f.name for f in fields(cls)}
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return raw


def _check_types(name, obj):
    for f in fields(obj):
        v = getattr(obj, f.name)
        want = f.type if isinstance(f.type, str) else f.type.__name__
        if v is None:
            if "None" not in want:
                raise ConfigError(f"{name}.{f.name} must be set")
            continue
        if want.startswith("int") and (not isinstance(v, int) or isinstance(v, bool)):
            raise ConfigError(f"{name}.{f.name} must be an integer")
        if want.startswith("float") and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            raise ConfigError(f"{name}.{f.name} must be a number")
        if want.startswith("bool") and not isinstance(v, bool):
            raise ConfigError(f"{name}.{f.name} must be true or false")
        if want.startswith("str") and not isinstance(v, str):
            raise ConfigError(f"{name}.{f.name} must be a string")


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = sorted(set(raw) - _TOP)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "system" not in raw or not isinstance(raw["system"], str) or not raw["system"]:
        raise ConfigError("'system' must name a builtin system or 'module:factory'")
    grid = raw.get("alpha_grid")
    if not isinstance(grid, list) or not grid:
        raise ConfigError("'alpha_grid' must be a non-empty list of positive slopes")
    if not all(isinstance(a, (int, float)) and not isinstance(a, bool) and a > 0 for a in grid):
        raise ConfigError("'alpha_grid' entries must be positive numbers")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("'alpha_grid' must be strictly ascending")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("'workers' must be a positive integer")

    parts = {}
    for name, cls in _TABLES.items():
        spec = cls(**_table(name, cls, raw.get(name, {})))
        _check_types(name, spec)
        parts[name] = spec
    synth_raw = _table("synthesis", SynthesisConfig, raw.get("synthesis", {}), _SYNTH)
    try:
        synth = SynthesisConfig(max_refinements=parts["budgets"].max_refinements, **synth_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[synthesis]: {exc}") from None
    _check_types("synthesis", synth)

    sur, bud, sim = parts["surrogate"], parts["budgets"], parts["sim"]
    if sur.weights is None and (sur.width < 1 or sur.samples < 10 * sur.width or sur.epochs < 0):
        raise ConfigError("[surrogate] needs width >= 1, samples >= 10*width and epochs >= 0")
    if bud.outer_iters < 1 or bud.max_refinements < 0 or bud.restarts < 0:
        raise ConfigError("[budgets] needs outer_iters >= 1, max_refinements >= 0, restarts >= 0")
    if bud.wall_clock_s is not None and bud.wall_clock_s <= 0:
        raise ConfigError("[budgets] wall_clock_s must be positive")
    if sim.n_trajectories < 0 or sim.horizon_s <= 0 or not 0 < sim.dt <= 1e-2:
        raise ConfigError("[sim] needs n_trajectories >= 0, horizon_s > 0 and 0 < dt <= 1e-2")

    return RunConfig(
        system=raw["system"],
        alpha_grid=tuple(float(a) for a in grid),
        synthesis=synth,
        workers=workers,
        source=source,
        digest=hashlib.sha256(text.encode()).hexdigest(),
        **parts,
    )


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``pendulum.toml`` and friends)."""
    return Path(str(resources.files("pwacert") / "configs" / name))


def load_config(path) -> RunConfig:
    """Read and validate ``path``; a bare bundled file name also works."""
    if not Path(path).exists() and Path(path).name == str(path) and bundled_config(str(path)).exists():
        path = bundled_config(str(path))
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
