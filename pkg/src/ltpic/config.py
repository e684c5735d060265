"""Simulation configuration and its INI-style file format.

Every key lives in exactly one section; unknown sections or keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import Constants


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    # [run]
    dt: float = 1.0e-11
    subcycles: int = 1
    n_steps: int = 400
    seed: int = 1
    ranks: int = 1
    workers: int = 1
    sequential: bool = False
    mode: str = "discharge"  # or "zero_d"
    # [domain]
    L: float = 0.025
    M: int = 100
    area: float = 1.0e-4
    # [particles]
    n_init: int = 20000
    capacity_factor: float = 10.0
    density0: float = 1.0e15
    temperature0: float = 2.0
    subbins: int = 1
    # [drive]
    v0: float = 100.0
    freq: float = 13.56e6
    # [gas]
    n_n: float = 3.22e22
    # [species]
    mu_i: float = 2.0
    d_i: float = 0.06
    mu_m: float = 0.0
    d_m: float = 0.02
    mu_n: float = 0.0
    d_n: float = 0.0
    freeze_neutrals: bool = True
    # [collisions]
    elastic: str = "argon_elastic.txt"
    ionization: str = "argon_ionization.txt"
    excitation: str = "argon_excitation.txt"
    two_step: str = "argon_two_step_ionization.txt"
    coulomb: bool = True
    ln_lambda: float = 10.0
    recomb_rate: float = 1.0e-39
    recomb_energy: float = 4.21
    # [zero_d]
    efield: float = 3220.0
    ionization_fraction: float = 0.0
    min_steps: int = 2000
    max_steps: int = 60000
    check_every: int = 100
    steady_tol: float = 1.0e-3
    # [diagnostics]
    interval: int = 100
    eedf_bins: int = 100
    eedf_emax: float = 60.0
    # [constants]
    constants: Constants = field(default_factory=Constants)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.subcycles < 1:
            raise ConfigError("subcycles must be >= 1")
        if self.capacity_factor < 1:
            raise ConfigError("capacity_factor must be >= 1")
        if self.ranks < 1 or self.workers < 1:
            raise ConfigError("ranks and workers must be >= 1")
        if self.mode not in ("discharge", "zero_d"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.M < 1 or not self.L > 0:
            raise ConfigError("domain needs M >= 1 and L > 0")
        if self.subbins < 1:
            raise ConfigError("subbins must be >= 1")

    @property
    def capacity(self) -> int:
        return int(round(self.capacity_factor * self.n_init))

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def channel_names(self) -> list[str]:
        return [n for n in ("elastic", "ionization", "excitation", "two_step") if getattr(self, n)]


SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("dt", "subcycles", "n_steps", "seed", "ranks", "workers", "sequential", "mode"),
    "domain": ("L", "M", "area"),
    "particles": ("n_init", "capacity_factor", "density0", "temperature0", "subbins"),
    "drive": ("v0", "freq"),
    "gas": ("n_n",),
    "species": ("mu_i", "d_i", "mu_m", "d_m", "mu_n", "d_n", "freeze_neutrals"),
    "collisions": (
        "elastic", "ionization", "excitation", "two_step",
        "coulomb", "ln_lambda", "recomb_rate", "recomb_energy",
    ),
    "zero_d": ("efield", "ionization_fraction", "min_steps", "max_steps", "check_every", "steady_tol"),
    "diagnostics": ("interval", "eedf_bins", "eedf_emax"),
    "constants": ("e", "m_e", "eps0", "m_heavy"),
}


def _convert(raw: str, kind):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if kind is float:
        return float(raw)
    value = raw.strip()
    return "" if value.lower() in ("none", "off", "") else value


def parse_config(text: str) -> SimConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (L, M)
    parser.read_string(text)
    types = {f.name: f.type for f in fields(SimConfig)}
    kinds = {"float": float, "int": int, "bool": bool, "str": str}
    values: dict = {}
    consts: dict = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                if section == "constants":
                    consts[key] = float(raw)
                else:
                    values[key] = _convert(raw, kinds[types[key]])
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    if consts:
        values["constants"] = Constants(**consts)
    return SimConfig(**values)


def load_config(path) -> SimConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: SimConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            obj = cfg.constants if section == "constants" else cfg
            lines.append(f"{key} = {getattr(obj, key)}")
        lines.append("")
    return "\n".join(lines)
