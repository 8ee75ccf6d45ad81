"""Run configuration: a single flat record shared by the samplers and the CLI.

The on-disk format is a flat ``key = value`` text file with ``#`` comments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tempering import TemperingConfig

MODES = ("tempered-pf", "tempered-exact", "pmh", "scaling-study")
MODELS = ("linear", "atan")


@dataclass
class RunConfig:
    """Everything needed to reproduce a run bit-exactly."""

    model: str = "linear"
    mode: str = "tempered-pf"
    # Data source: simulate T points with data_seed, or load data_csv.
    T: int = 200
    data_seed: int = 1
    data_csv: str | None = None
    theta_true: tuple = (0.8, -1.0)

    n_x: int = 100
    n_theta: int = 100
    K: int = 10
    alpha: float = 0.5
    lambda0: float = 10.0
    lambda_target: float = 1e-2
    accept_floor: float = 0.05
    p_max: int = 500
    warm_moves: int = 20
    proposal_scales: tuple = (0.1, 0.1)
    adapt_proposal: bool = True

    seed: int = 0
    out_dir: str = "out"
    bins: int = 30
    threads: int = 1
    chain_length: int = 10000  # pmh mode only
    scaling_T: tuple = ()  # scaling-study mode only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", field="mode")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model id {self.model!r}", field="model")
        for name in ("T", "n_x", "n_theta", "K", "bins", "threads", "chain_length"):
            if getattr(self, name) < 1:
                raise ConfigError("must be a positive count", field=name)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("must lie in (0, 1)", field="alpha")
        if self.lambda_target >= self.lambda0:
            raise ConfigError("must be smaller than lambda0", field="lambda_target")
        if any(s <= 0 for s in self.proposal_scales):
            raise ConfigError("scales must be strictly positive", field="proposal_scales")

    def tempering(self) -> TemperingConfig:
        return TemperingConfig(
            alpha=self.alpha,
            lambda0=self.lambda0,
            lambda_target=self.lambda_target,
            accept_floor=self.accept_floor,
            p_max=self.p_max,
        )

    def echo(self) -> str:
        """Key-value dump sufficient to re-run bit-identically."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(format(x, ".17g") if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(name: str, raw: str, kind):
    try:
        if kind is bool:
            return _BOOL[raw.strip().lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            raw = raw.strip()
            if not raw:
                return ()
            return tuple(float(v) for v in raw.split(","))
        return raw.strip()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot parse value {raw!r}", field=name) from exc


def parse_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse a flat key-value config file, apply overrides, validate."""
    text = Path(path).read_text()
    defaults = RunConfig()
    kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}
    kinds["data_csv"] = str
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key", field=key)
        values[key] = _parse_value(key, raw, kinds[key])
    cfg = RunConfig(**values)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def stream_rng(master_seed: int, *path: int) -> np.random.Generator:
    """A named RNG stream: deterministic given the master seed and path tags,
    independent of scheduling or worker count."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *[int(p) for p in path]]))
