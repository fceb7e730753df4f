"""Run configuration files and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .classifier import preset_name
from .locserver import PROFILES, DefenseConfig, HistogramModel, ServerConfig, get_profile
from .scenegen import SuiteConfig

__all__ = [
    "ConfigError",
    "ServerSection",
    "AttackSection",
    "SweepSection",
    "RunConfig",
    "load_config",
    "resolve_seed",
    "resolve_endpoint",
    "file_digest",
    "RunManifest",
]

SEED_ENV = "POSEATTACK_SEED"
ENDPOINT_ENV = "POSEATTACK_ENDPOINT"
DEFAULT_ENDPOINT = "127.0.0.1:7878"


class ConfigError(ValueError):
    pass


def _build(cls, d: dict | None, where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ServerSection:
    profile: str = "tier_high"
    profile_overrides: dict = field(default_factory=dict)
    scale_withheld: float | None = None
    audit: bool = False
    defense: dict = field(default_factory=dict)
    histogram: dict = field(default_factory=dict)
    endpoint: str | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.scale_withheld is not None and not self.scale_withheld > 0:
            raise ValueError("scale_withheld must be positive")

    def robustness(self):
        return get_profile(self.profile, **self.profile_overrides)

    def server_config(self, seed: int) -> ServerConfig:
        hist = dict(self.histogram)
        for k, v in hist.items():
            if isinstance(v, list):
                hist[k] = tuple(v)
        return ServerConfig(
            seed=seed,
            scale_withheld=self.scale_withheld,
            audit=self.audit,
            defense=_build(DefenseConfig, self.defense, "server.defense"),
            histogram=_build(HistogramModel, hist, "server.histogram"),
        )


@dataclass
class AttackSection:
    preset: str = "30deg_0.5m"
    mode: str = "auto"
    max_iters: int = 500

    def __post_init__(self):
        self.preset = preset_name(self.preset)
        if self.mode not in ("auto", "rigid", "sim3"):
            raise ValueError(f"bad mode {self.mode!r}")


@dataclass
class SweepSection:
    fraction_x: float = 0.10
    min_objects: list[int] | None = None  # None: 1 .. max support + 1

    def __post_init__(self):
        if not 0.0 < self.fraction_x <= 1.0:
            raise ValueError("fraction_x must lie in (0, 1]")


@dataclass
class RunConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    server: ServerSection = field(default_factory=ServerSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        extra = sorted(set(d) - {"suite", "server", "attack", "sweep", "seed"})
        if extra:
            raise ConfigError(f"unknown top-level keys {extra}")
        suite = d.get("suite", {})
        if not isinstance(suite, dict):
            raise ConfigError("suite: expected a mapping")
        unknown = sorted(set(suite) - {f.name for f in fields(SuiteConfig)})
        if unknown:
            raise ConfigError(f"suite: unknown keys {unknown}")
        try:
            suite_cfg = SuiteConfig.from_dict(suite)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"suite: {exc}") from exc
        seed = d.get("seed", suite_cfg.seed)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(
            suite=suite_cfg,
            server=_build(ServerSection, d.get("server"), "server"),
            attack=_build(AttackSection, d.get("attack"), "attack"),
            sweep=_build(SweepSection, d.get("sweep"), "sweep"),
            seed=seed,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        out = RunConfig.from_dict(self.to_dict())
        out.seed = seed
        out.suite.seed = seed
        return out

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON run config; a missing path yields the defaults."""
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return RunConfig.from_dict(d)


def resolve_seed(flag: int | None, config_seed: int) -> int:
    """Flag beats environment beats config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return config_seed


def resolve_endpoint(flag: str | None, config_endpoint: str | None) -> str:
    return flag or os.environ.get(ENDPOINT_ENV) or config_endpoint or DEFAULT_ENDPOINT


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


@dataclass
class RunManifest:
    """What ran, with which inputs, producing which files."""

    command: str
    argv: list[str]
    config: dict
    seeds: dict[str, int]
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    artifacts: dict[str, str] = field(default_factory=dict)  # path -> sha256
    versions: dict[str, str] = field(default_factory=dict)
    started_at: float = field(default_factory=time.time)
    wall_clock_s: float | None = None
    status: str = "running"

    def __post_init__(self):
        if not self.versions:
            from . import __version__

            self.versions = {
                "poseleak": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
            }

    @property
    def config_hash(self) -> str:
        payload = {"command": self.command, "config": self.config, "seeds": self.seeds, "inputs": self.inputs}
        return hashlib.sha256(_canonical(payload)).hexdigest()

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            self.inputs[str(q)] = file_digest(q)

    def add_artifact(self, path: str | Path) -> None:
        self.artifacts[str(path)] = file_digest(path)

    def finish(self, status: str = "ok") -> None:
        self.status = status
        self.wall_clock_s = time.time() - self.started_at

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["config_hash"] = self.config_hash
        return rec

    def write(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / "manifest.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_record(), indent=1, sort_keys=True) + "\n")
        return p

