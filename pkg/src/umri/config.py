"""Run configuration: INI-style ``key = value`` file with section headers.

Any value can be overridden from the environment with
``UMRI__<SECTION>__<KEY>=value`` (case-insensitive section and key), e.g.
``UMRI__TRAIN__EPOCHS=3``.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, fields
from typing import Mapping, Optional

import torch

from .denoiser import CnnDenoiser, DenoiserConfig, FoundationDenoiser
from .errors import ConfigError
from .nn.vit import preset
from .physics import SamplingMask, acs_width, make_equispaced_mask
from .recon import CascadeParams, SmeConfig, UnrolledRecon
from .train import Schedule

ENV_PREFIX = "UMRI__"
VARIANTS = ("baseline-cnn", "vit-fusion")


@dataclass
class AcsSpec:
    acs_lines: Optional[int] = None
    center_fraction: Optional[float] = None

    def __post_init__(self):
        if (self.acs_lines is None) == (self.center_fraction is None):
            raise ConfigError("ACS spec needs exactly one of acs_lines / center_fraction")

    @classmethod
    def parse(cls, text: str) -> "AcsSpec":
        """``lines=24`` or ``cf=0.08``."""
        key, _, value = text.strip().partition("=")
        try:
            if key in ("lines", "acs_lines"):
                return cls(acs_lines=int(value))
            if key in ("cf", "center_fraction"):
                return cls(center_fraction=float(value))
        except ValueError:
            pass
        raise ConfigError(f"cannot parse ACS spec {text!r}; use lines=N or cf=F")

    def label(self) -> str:
        if self.acs_lines is not None:
            return f"lines={self.acs_lines}"
        return f"cf={self.center_fraction:g}"

    def mask(self, width: int, acceleration: int) -> SamplingMask:
        return make_equispaced_mask(width, acceleration, self.acs_lines, self.center_fraction)


@dataclass(frozen=True)
class EvalCell:
    acceleration: int
    acs: AcsSpec
    family: str

    @property
    def key(self) -> tuple:
        return (self.family, self.acceleration, self.acs.label())


@dataclass
class EvalGrid:
    cells: list[EvalCell]

    def __post_init__(self):
        if not self.cells:
            raise ConfigError("evaluation grid is empty")

    @classmethod
    def parse(cls, text: str) -> "EvalGrid":
        """Comma/semicolon separated ``R:acs:family`` cells, e.g. ``4:cf=0.08:B``."""
        cells = []
        for item in text.replace(";", ",").split(","):
            item = item.strip()
            if not item:
                continue
            parts = item.split(":")
            if len(parts) != 3:
                raise ConfigError(f"bad eval cell {item!r}; expected R:acs:family")
            try:
                r = int(parts[0])
            except ValueError:
                raise ConfigError(f"bad acceleration in eval cell {item!r}") from None
            fam = parts[2].strip().upper()
            if fam not in ("A", "B", "C"):
                raise ConfigError(f"unknown family in eval cell {item!r}")
            cells.append(EvalCell(r, AcsSpec.parse(parts[1]), fam))
        return cls(cells)

    def format(self) -> str:
        return ", ".join(f"{c.acceleration}:{c.acs.label()}:{c.family}" for c in self.cells)


DEFAULT_GRID = ("4:lines=8:A, 8:lines=8:A, "
                "4:cf=0.08:B, 4:cf=0.04:B, 8:cf=0.08:B, 8:cf=0.04:B, "
                "4:cf=0.08:C, 4:cf=0.04:C, 8:cf=0.08:C, 8:cf=0.04:C")


@dataclass
class RunConfig:
    # [data]
    family: str = "A"
    size: int = 64
    coils: int = 4
    noise_std: float = 0.003
    count: int = 320
    fractions: tuple = (0.625, 0.125, 0.25)
    ood_families: tuple = ("B", "C")
    ood_count: int = 80
    data_seed: int = 0
    # [model]
    variant: str = "vit-fusion"
    encoder: str = "desk"
    encoder_weights: str = ""
    working_size: int = 64
    cascades: int = 4
    shared_denoiser: bool = True
    residual: bool = False
    sme_pools: int = 4
    sme_chans: int = 8
    cnn_chans: int = 12
    cnn_pools: int = 3
    # [mask]
    acceleration: int = 4
    acs: str = "lines=8"
    # [train]
    lr: float = 1e-3
    decay_epoch: int = 40
    decay_factor: float = 0.1
    epochs: int = 50
    patience: int = 5
    batch_size: int = 4
    seed: int = 0
    # [eval]
    grid: str = DEFAULT_GRID
    # [run]
    deterministic: bool = True

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.size < 8 or self.coils < 1 or self.count < 0 or self.ood_count < 0:
            raise ConfigError("size >= 8, coils >= 1 and nonnegative counts are required")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) \
                or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError(f"fractions must be three nonnegative values summing to 1, "
                              f"got {self.fractions}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.family not in ("A", "B", "C") or any(f not in ("A", "B", "C") for f in self.ood_families):
            raise ConfigError("families must be among A, B, C")
        CascadeParams(self.cascades, self.shared_denoiser)
        SmeConfig(self.sme_pools, self.sme_chans)
        self.schedule()
        acs = self.acs_spec()
        if acs_width(self.size, acs.acs_lines, acs.center_fraction) > self.size:
            raise ConfigError("ACS block wider than the image")
        self.mask()
        EvalGrid.parse(self.grid)
        if self.variant == "vit-fusion":
            self.denoiser_config()
        return self

    def acs_spec(self) -> AcsSpec:
        return AcsSpec.parse(self.acs)

    def mask(self) -> SamplingMask:
        return self.acs_spec().mask(self.size, self.acceleration)

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.decay_epoch, self.decay_factor, self.epochs,
                        self.patience, self.batch_size, self.seed)

    def eval_grid(self) -> EvalGrid:
        return EvalGrid.parse(self.grid)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(encoder=preset(self.encoder), working_size=self.working_size,
                              residual=self.residual,
                              encoder_weights=self.encoder_weights or None)

    def build_model(self) -> UnrolledRecon:
        """Fresh model; trainable parameters drawn from ``torch`` seeded with ``seed``."""
        torch.manual_seed(self.seed)
        if self.variant == "vit-fusion":
            dcfg = self.denoiser_config()
            factory = lambda: FoundationDenoiser(dcfg)  # noqa: E731
        else:
            factory = lambda: CnnDenoiser(self.cnn_chans, self.cnn_pools, self.residual)  # noqa: E731
        return UnrolledRecon(factory, self.cascades, self.shared_denoiser,
                             SmeConfig(self.sme_pools, self.sme_chans))

    # serialization

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, names in SECTIONS.items():
            parser[section] = {n: _format(getattr(self, n)) for n in names}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str = "", env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values: dict[str, str] = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser[section].items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = value
        for name, value in (env or {}).items():
            if not name.upper().startswith(ENV_PREFIX):
                continue
            section, _, key = name[len(ENV_PREFIX):].lower().partition("__")
            if section not in SECTIONS or key not in SECTIONS[section]:
                raise ConfigError(f"environment override {name} names no config key")
            values[key] = value
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for key, raw in values.items():
            kwargs[key] = _parse(key, raw, types[key], getattr(defaults, key))
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path=None, env: Optional[Mapping[str, str]] = None) -> "RunConfig":
        text = ""
        if path is not None:
            with open(path) as fh:
                text = fh.read()
        return cls.from_ini(text, os.environ if env is None else env)


SECTIONS = {
    "data": ("family", "size", "coils", "noise_std", "count", "fractions", "ood_families",
             "ood_count", "data_seed"),
    "model": ("variant", "encoder", "encoder_weights", "working_size", "cascades",
              "shared_denoiser", "residual", "sme_pools", "sme_chans", "cnn_chans", "cnn_pools"),
    "mask": ("acceleration", "acs"),
    "train": ("lr", "decay_epoch", "decay_factor", "epochs", "patience", "batch_size", "seed"),
    "eval": ("grid",),
    "run": ("deterministic",),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, annotation: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in items)
            return tuple(p.upper() for p in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels (default) or the fast parallel mode."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)
