"""Flat key=value run configuration with command-line overrides.

Every knob a run depends on lives here so the metrics report can echo the
complete effective configuration; reruns from the echo reproduce the run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import BINARY, CONTINUOUS


@dataclass(frozen=True)
class RunConfig:
    mode: str = CONTINUOUS
    rank: tuple[int, ...] = (3,)  # one value is broadcast across modes
    num_inducing: int = 100
    tasks: int = 0  # 0 = host parallelism (or GPTENSOR_TASKS)
    seed: int = 0
    optimizer: str = "lbfgs"
    max_iters: int = 500
    grad_tol: float = 1e-5
    elbo_rel_tol: float = 1e-9
    step_size: float = 1e-3
    lbfgs_memory: int = 10
    balance: bool = False
    # synthetic-data knobs
    dims: tuple[int, ...] = (30, 30, 30)
    density: float = 0.02
    n_test: int = 500
    beta: float = 100.0
    # io paths
    train: str = ""
    test: str = ""
    checkpoint: str = ""
    out: str = "."

    def __post_init__(self):
        if self.mode not in (CONTINUOUS, BINARY):
            raise ValueError(f"mode must be continuous or binary, got {self.mode!r}")
        if self.optimizer not in ("lbfgs", "gd", "gradient_descent"):
            raise ValueError(f"optimizer must be lbfgs or gd, got {self.optimizer!r}")
        if self.num_inducing < 1 or self.tasks < 0:
            raise ValueError("num_inducing must be positive and tasks non-negative")
        if any(r < 1 for r in self.rank) or any(d < 1 for d in self.dims):
            raise ValueError("rank and dims entries must be positive")
        if self.density <= 0:
            raise ValueError("density must be positive")

    def task_count(self) -> int:
        from .parallel import default_task_count

        return self.tasks or default_task_count()

    def ranks_for(self, num_modes: int) -> tuple[int, ...]:
        if len(self.rank) == 1:
            return self.rank * num_modes
        if len(self.rank) != num_modes:
            raise ValueError(
                f"rank lists {len(self.rank)} values for a {num_modes}-mode tensor"
            )
        return self.rank

    def echo_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name}={val}")
        return lines


_INT_KEYS = {"num_inducing", "tasks", "seed", "max_iters", "lbfgs_memory", "n_test"}
_FLOAT_KEYS = {"grad_tol", "elbo_rel_tol", "step_size", "density", "beta"}
_TUPLE_KEYS = {"rank", "dims"}
_BOOL_KEYS = {"balance"}
_ALIASES = {"p": "num_inducing"}


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _TUPLE_KEYS:
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if key in _BOOL_KEYS:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    return raw


def parse_config_file(path: str | Path) -> dict:
    """Read key=value lines; '#' starts a comment, blank lines are skipped."""
    values: dict = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def build_config(config_path: str | None, overrides: dict) -> RunConfig:
    """File values first, then non-None overrides on top of the defaults."""
    values: dict = {}
    if config_path:
        values.update(parse_config_file(config_path))
    for key, val in overrides.items():
        if val is None:
            continue
        key = _ALIASES.get(key, key)
        values[key] = _coerce(key, val) if isinstance(val, str) else val
    return replace(RunConfig(), **values)


__all__ = ["RunConfig", "parse_config_file", "build_config"]
