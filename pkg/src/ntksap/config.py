"""Experiment configuration: TOML parsing, validation, hashing and grid expansion.

A config file has the sections ``[arch]``, ``[data]``, ``[prune]``,
``[train]``, ``[sweep]`` and ``[spectrum]`` plus an optional top-level
``output_dir``.  Every key is validated up front; errors carry the line of
the offending key.  The config hash is the SHA-256 of a canonical JSON dump
of the fully defaulted config, so formatting and comments never change it
while any semantic edit does.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .nn import INIT_SCHEMES, Architecture, ArchitectureError, resolve_layers
from .prune import DATA_METHODS, INPUT_SOURCES, METHODS, ONE_SHOT, PruneConfig, PruneError
from .train import LOSSES, TrainConfig

SEED_OFFSET_ENV = "NTKPRUNE_SEED_OFFSET"
DATA_SOURCES = ("blobs", "two_moons", "idx")
TRAIN_INITS = ("fresh", "reuse_last_scoring")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to the 1-based line where the key is assigned."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    assign = re.compile(r"^\s*([A-Za-z0-9_-]+)\s*=")
    for no, raw in enumerate(text.splitlines(), start=1):
        if m := header.match(raw):
            section = m.group(1)
            lines.setdefault((section, ""), no)
        elif m := assign.match(raw):
            lines.setdefault((section, m.group(1)), no)
    return lines


class _Reader:
    """Typed access to one parsed section, reporting errors with line numbers."""

    def __init__(self, table: dict, section: str, path, lines):
        self.table, self.section, self.path, self.lines = table, section, path, lines
        self.used: set[str] = set()

    def fail(self, key: str | None, msg: str):
        line = self.lines.get((self.section, key or ""))
        if line is None:
            line = self.lines.get((self.section, ""))
        name = f"[{self.section}] {key}" if key else f"[{self.section}]"
        raise ConfigError(f"{name}: {msg}", self.path, line)

    def get(self, key: str, kind, default=None, required: bool = False):
        self.used.add(key)
        if key not in self.table:
            if required:
                self.fail(None, f"missing required key {key!r}")
            return default
        value = self.table[key]
        ok = {
            int: lambda v: isinstance(v, int) and not isinstance(v, bool),
            float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            bool: lambda v: isinstance(v, bool),
            str: lambda v: isinstance(v, str),
        }
        if isinstance(kind, list):
            (inner,) = kind
            if not isinstance(value, list) or not all(ok[inner](v) for v in value):
                self.fail(key, f"expected a list of {inner.__name__}, got {value!r}")
            return [inner(v) for v in value]
        if not ok[kind](value):
            self.fail(key, f"expected {kind.__name__}, got {value!r}")
        return kind(value)

    def choice(self, key: str, options, default=None, required: bool = False):
        value = self.get(key, str, default, required)
        if value is not None and value not in options:
            self.fail(key, f"must be one of {list(options)}, got {value!r}")
        return value

    def finish(self):
        extra = sorted(set(self.table) - self.used)
        if extra:
            self.fail(extra[0], "unknown key")


@dataclass(frozen=True)
class DataSpec:
    source: str = "blobs"
    seed: int = 0
    num_classes: int = 10
    n_per_class: int = 100
    n_test_per_class: int | None = None
    dim: int = 32
    spread: float = 0.3
    n: int = 200
    noise: float = 0.1
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    max_train: int | None = None
    max_test: int | None = None
    pruning_per_class: int = 10


@dataclass(frozen=True)
class PruneSpec:
    """Shared pruning options; method, density, rounds and eps vary per cell."""
    method: str = "ntksap"
    rounds: int = 1
    batches_per_round: int | None = None
    batch_size: int = 100
    eps: float = 1e-4
    reinit_count: int = 1
    input_source: str | None = None  # None -> dataset for data methods, noise otherwise

    def source_for(self, method: str) -> str:
        if self.input_source is not None:
            return self.input_source
        return "dataset" if method in DATA_METHODS else "gaussian_noise"


@dataclass(frozen=True)
class SweepSpec:
    methods: tuple[str, ...]
    sparsities: tuple[float, ...]
    seeds: tuple[int, ...]
    rounds: tuple[int, ...] | None = None
    eps: tuple[float, ...] | None = None
    spectrum: bool = False


@dataclass(frozen=True)
class SpectrumSpec:
    num_inputs: int = 100
    seed: int = 0
    max_dim: int = 1000
    fd_draws: int = 16


@dataclass(frozen=True)
class Cell:
    method: str
    sparsity: float
    seed: int
    rounds: int
    eps: float | None  # only NTK-SAP cells carry an eps tag

    @property
    def density(self) -> float:
        return 1.0 - self.sparsity

    @property
    def cell_id(self) -> str:
        tag = f"{self.method}-sp{self.sparsity:.4f}-seed{self.seed}-T{self.rounds}"
        if self.eps is not None:
            tag += f"-eps{self.eps:g}"
        return tag


@dataclass(frozen=True)
class ExperimentConfig:
    arch: Architecture
    init: str
    data: DataSpec
    prune: PruneSpec
    train: TrainConfig
    train_init: str
    sweep: SweepSpec
    spectrum: SpectrumSpec
    output_dir: str | None = None
    seed_offset: int = 0
    source: str | None = field(default=None, compare=False)

    # -- hashing -------------------------------------------------------------

    def canonical(self) -> dict[str, Any]:
        """Fully defaulted semantic content; excludes output location and seed offset."""
        return {
            "arch": {"input_shape": list(self.arch.input_shape), "layers": list(self.arch.layers),
                     "bias": self.arch.bias, "init": self.init},
            "data": asdict(self.data),
            "prune": asdict(self.prune),
            "train": {**asdict(self.train), "lr_drops": list(self.train.lr_drops),
                      "train_init": self.train_init},
            "sweep": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(self.sweep).items()},
            "spectrum": asdict(self.spectrum),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- seeds and grid -----------------------------------------------------

    @property
    def seeds(self) -> list[int]:
        return [s + self.seed_offset for s in self.sweep.seeds]

    @property
    def data_seed(self) -> int:
        return self.data.seed + self.seed_offset

    @property
    def spectrum_seed(self) -> int:
        return self.spectrum.seed + self.seed_offset

    def cells(self) -> list[Cell]:
        """Grid in method, T, eps, sparsity, seed order; one-shot methods get T = 1."""
        out: list[Cell] = []
        for method in self.sweep.methods:
            if method in ONE_SHOT:
                rounds = [1]
            else:
                rounds = list(self.sweep.rounds or (self.prune.rounds,))
            eps_list = list(self.sweep.eps or (self.prune.eps,)) if method == "ntksap" else [None]
            for T in rounds:
                for eps in eps_list:
                    for sp in self.sweep.sparsities:
                        for seed in self.seeds:
                            cell = Cell(method, sp, seed, T, eps)
                            if cell not in out:
                                out.append(cell)
        return out

    def prune_config(self, cell: Cell) -> PruneConfig:
        p = self.prune
        return PruneConfig(
            method=cell.method, density=cell.density, rounds=cell.rounds,
            batches_per_round=p.batches_per_round, batch_size=p.batch_size,
            eps=p.eps if cell.eps is None else cell.eps, reinit_count=p.reinit_count,
            input_source=p.source_for(cell.method), seed=cell.seed)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)


def seed_offset_from_env(env=None) -> int:
    raw = (os.environ if env is None else env).get(SEED_OFFSET_ENV, "").strip()
    if not raw:
        return 0
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_OFFSET_ENV} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"{SEED_OFFSET_ENV} must be non-negative, got {value}")
    return value


def load_config(path: str | Path, seed_offset: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path, seed_offset)


def parse_config(text: str, path: str | Path | None = None,
                 seed_offset: int | None = None) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", path, int(m.group(1)) if m else None) from None
    lines = _key_lines(text)
    base = Path(path).parent if path is not None else Path(".")
    known = {"arch", "data", "prune", "train", "sweep", "spectrum"}
    for key, value in doc.items():
        if key == "output_dir":
            if not isinstance(value, str):
                raise ConfigError("output_dir must be a string", path, lines.get(("", key)))
        elif key not in known or not isinstance(value, dict):
            raise ConfigError(f"unknown top-level entry {key!r}", path,
                              lines.get((key, "")) or lines.get(("", key)))
    sec = {name: _Reader(doc.get(name, {}), name, path, lines) for name in known}

    # [arch]
    a = sec["arch"]
    input_shape = a.get("input_shape", [int], required=True)
    layers = a.get("layers", [str], required=True)
    arch = Architecture(tuple(input_shape), tuple(layers), a.get("bias", bool, True))
    init = a.choice("init", INIT_SCHEMES, "kaiming_normal")
    try:
        specs = resolve_layers(arch)
    except ArchitectureError as exc:
        a.fail("layers", str(exc))
    a.finish()
    num_outputs = [s for s in specs if s.prunable][-1].fan_out

    # [data]
    d = sec["data"]
    source = d.choice("source", DATA_SOURCES, "blobs")
    ds = DataSpec(
        source=source,
        seed=d.get("seed", int, 0),
        num_classes=d.get("num_classes", int, 2 if source == "two_moons" else 10),
        n_per_class=d.get("n_per_class", int, 100),
        n_test_per_class=d.get("n_test_per_class", int),
        dim=d.get("dim", int, 32),
        spread=d.get("spread", float, 0.3),
        n=d.get("n", int, 200),
        noise=d.get("noise", float, 0.1),
        train_images=d.get("train_images", str),
        train_labels=d.get("train_labels", str),
        test_images=d.get("test_images", str),
        test_labels=d.get("test_labels", str),
        max_train=d.get("max_train", int),
        max_test=d.get("max_test", int),
        pruning_per_class=d.get("pruning_per_class", int, 10),
    )
    d.finish()
    if ds.seed < 0:
        d.fail("seed", "must be non-negative")
    if ds.pruning_per_class < 1:
        d.fail("pruning_per_class", "must be >= 1")
    if source == "two_moons" and ds.num_classes != 2:
        d.fail("num_classes", "two_moons has exactly 2 classes")
    if source == "blobs":
        if ds.num_classes < 2 or ds.n_per_class < 1 or ds.dim < 1 or ds.spread < 0:
            d.fail(None, "blobs need num_classes >= 2, n_per_class >= 1, dim >= 1, spread >= 0")
        if (ds.dim,) != arch.input_shape:
            a.fail("input_shape", f"blobs produce inputs of shape ({ds.dim},), "
                                  f"architecture expects {arch.input_shape}")
    elif source == "two_moons":
        if ds.n < 2 or ds.noise < 0:
            d.fail(None, "two_moons needs n >= 2 and noise >= 0")
        if arch.input_shape != (2,):
            a.fail("input_shape", f"two_moons produce inputs of shape (2,), "
                                  f"architecture expects {arch.input_shape}")
    else:
        for key in ("train_images", "train_labels"):
            if getattr(ds, key) is None:
                d.fail(None, f"idx source needs {key!r}")
        if (ds.test_images is None) != (ds.test_labels is None):
            d.fail(None, "test_images and test_labels must be given together")
        resolved = {}
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            value = getattr(ds, key)
            if value is not None:
                p = Path(value) if Path(value).is_absolute() else base / value
                if not p.is_file():
                    d.fail(key, f"file not found: {p}")
                resolved[key] = str(p)
        ds = replace(ds, **resolved)
    if ds.num_classes != num_outputs:
        a.fail("layers", f"network has {num_outputs} outputs but the data has "
                         f"{ds.num_classes} classes")

    # [prune]
    p = sec["prune"]
    ps = PruneSpec(
        method=p.choice("method", METHODS, "ntksap"),
        rounds=p.get("rounds", int, 1),
        batches_per_round=p.get("batches_per_round", int),
        batch_size=p.get("batch_size", int, 100),
        eps=p.get("eps", float, 1e-4),
        reinit_count=p.get("reinit_count", int, 1),
        input_source=p.choice("input_source", INPUT_SOURCES),
    )
    p.finish()

    # [train]
    t = sec["train"]
    train_init = t.choice("train_init", TRAIN_INITS, "fresh")
    try:
        tc = TrainConfig(
            epochs=t.get("epochs", int, TrainConfig.epochs),
            batch_size=t.get("batch_size", int, TrainConfig.batch_size),
            lr=t.get("lr", float, TrainConfig.lr),
            momentum=t.get("momentum", float, TrainConfig.momentum),
            lr_drops=tuple(t.get("lr_drops", [int], [])),
            drop_factor=t.get("drop_factor", float, TrainConfig.drop_factor),
            weight_decay=t.get("weight_decay", float, TrainConfig.weight_decay),
            loss=t.choice("loss", LOSSES, "cross_entropy"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        t.fail(None, str(exc))
    t.finish()

    # [sweep]
    s = sec["sweep"]
    methods = s.get("methods", [str], [ps.method])
    for m in methods:
        if m not in METHODS:
            s.fail("methods", f"unknown method {m!r}; expected one of {list(METHODS)}")
    if not methods:
        s.fail("methods", "must not be empty")
    sparsities = s.get("sparsities", [float], [0.5])
    if not sparsities:
        s.fail("sparsities", "must not be empty")
    for v in sparsities:
        if not 0 <= v < 1:
            s.fail("sparsities", f"sparsity values must lie in [0, 1), got {v}")
    seeds = s.get("seeds", [int], [0])
    if not seeds:
        s.fail("seeds", "seed list must not be empty")
    if any(v < 0 for v in seeds):
        s.fail("seeds", "seeds must be non-negative")
    rounds = s.get("rounds", [int])
    eps = s.get("eps", [float])
    sw = SweepSpec(tuple(dict.fromkeys(methods)), tuple(dict.fromkeys(sparsities)),
                   tuple(dict.fromkeys(seeds)),
                   None if rounds is None else tuple(dict.fromkeys(rounds)),
                   None if eps is None else tuple(dict.fromkeys(eps)),
                   s.get("spectrum", bool, False))
    s.finish()
    if sw.rounds is not None and (not sw.rounds or min(sw.rounds) < 1):
        s.fail("rounds", "round counts must be >= 1")
    if sw.eps is not None and (not sw.eps or min(sw.eps) <= 0):
        s.fail("eps", "eps values must be positive")

    # [spectrum]
    sp = sec["spectrum"]
    spec = SpectrumSpec(num_inputs=sp.get("num_inputs", int, 100), seed=sp.get("seed", int, 0),
                        max_dim=sp.get("max_dim", int, 1000), fd_draws=sp.get("fd_draws", int, 16))
    sp.finish()
    if spec.num_inputs < 1 or spec.fd_draws < 1 or spec.seed < 0:
        sp.fail(None, "num_inputs and fd_draws must be >= 1 and seed >= 0")

    offset = seed_offset_from_env() if seed_offset is None else seed_offset
    cfg = ExperimentConfig(arch, init, ds, ps, tc, train_init, sw, spec,
                           doc.get("output_dir"), offset, None if path is None else str(path))

    # Every (method, input source) pairing and every per-cell option is
    # checked here, before any command starts working.
    for method in sw.methods:
        line_key = "input_source" if ps.input_source is not None else "methods"
        section = p if ps.input_source is not None else s
        if method in DATA_METHODS and ps.source_for(method) != "dataset":
            section.fail(line_key, f"{method}: method requires labeled data "
                                   f"(input_source = dataset)")
    for cell in cfg.cells():
        try:
            cfg.prune_config(cell)
        except PruneError as exc:
            p.fail(None, str(exc))
    return cfg
