"""Run configuration: a flat ``key = value`` file with validated defaults.

Every key is optional; an empty file gives the annulus run at
``gamma = 2**-4``. Lines starting with ``#`` are comments. A ``[run]``
section header may be present but is not required.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "PRESETS",
    "SWEEP_AXES",
    "DESK_GRIDS",
    "FULL_GRIDS",
    "initial_condition_annulus",
]

SECTION = "run"
SWEEP_AXES = ("none", "gamma", "h", "tau", "eigen", "Mcomponents")
# exponents k of the geometric grids (gamma_k = 2^-k, n_k = n_base 2^k, tau_k = T 2^-k)
DESK_GRIDS = {"gamma": (2, 6), "h": (0, 3), "tau": (4, 8), "eigen": (2, 6), "Mcomponents": (2, 6)}
FULL_GRIDS = {"gamma": (2, 11), "h": (0, 4), "tau": (4, 11), "eigen": (2, 12), "Mcomponents": (5, 13)}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def initial_condition_annulus(x, gamma, r_inner=0.4, r_outer=1.0):
    """``-tanh(d / sqrt(2 gamma))`` with ``d = max(r_inner - |x|, |x| - r_outer)``.

    ``x`` has shape ``(..., 2)``; positive inside the annulus, negative outside.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    d = np.maximum(r_inner - r, r - r_outer)
    return -np.tanh(d / np.sqrt(2.0 * gamma))


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _krange(text):
    a, _, b = text.replace(" ", "").partition("..")
    if not b:
        raise ValueError("expected 'first..last'")
    return int(a), int(b)


@dataclass(frozen=True)
class RunConfig:
    domain: tuple = (-2.0, 2.0, -2.0, 2.0)
    n: int = 64
    mesh_pattern: str = "alternating"
    gamma: float = 2.0**-4
    tau: float = 5e-4
    T: float = 0.1
    r_inner: float = 0.4
    r_outer: float = 1.0
    potential: str = "quartic"
    mobility: str = "default"
    mobility_c: float = 0.1
    beta2: float = 0.9
    C_i: float = 1.0
    C_e: float = 1.0
    alpha_plus: bool = False
    preset: str = "annulus"
    sweep: str = "none"
    sweep_k: tuple | None = None
    h_base_n: int = 8
    full_scale: bool = False
    eigen: bool = True
    snapshot_times: tuple = (0.0, 0.02, 0.04, 0.06, 0.076, 0.1)
    out: str = "runs"
    checkpoint: str = "final"
    workers: int = 1

    _parsers = {
        "domain": _floats, "snapshot_times": _floats, "sweep_k": _krange,
        "alpha_plus": _bool, "full_scale": _bool, "eigen": _bool,
    }

    def __post_init__(self):
        self.validate()

    @property
    def n_steps(self):
        return int(round(self.T / self.tau))

    def grid(self):
        """Exponents of the active sweep grid."""
        if self.sweep == "none":
            return ()
        lo, hi = self.sweep_k or (FULL_GRIDS if self.full_scale else DESK_GRIDS)[self.sweep]
        return tuple(range(lo, hi + 1))

    def validate(self):
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("domain", "empty rectangle")
        if self.n < 1:
            raise ConfigError("n", "must be a positive integer")
        if self.mesh_pattern not in ("alternating", "right"):
            raise ConfigError("mesh_pattern", f"unknown pattern {self.mesh_pattern!r}")
        for key in ("gamma", "tau", "T", "C_i", "C_e"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be positive")
        N = self.T / self.tau
        if abs(N - round(N)) > 1e-9 * max(N, 1.0) or round(N) < 1:
            raise ConfigError("tau", f"T/tau = {N!r} is not a positive integer")
        if not 0 < self.beta2 < 1:
            raise ConfigError("beta2", "must lie in (0, 1)")
        if not 0 <= self.r_inner < self.r_outer:
            raise ConfigError("r_inner", "need 0 <= r_inner < r_outer")
        if self.potential not in ("quartic", "quadratic"):
            raise ConfigError("potential", f"unknown potential {self.potential!r}")
        if self.mobility not in ("default", "constant"):
            raise ConfigError("mobility", f"unknown mobility {self.mobility!r}")
        if self.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {self.preset!r}")
        if self.sweep not in SWEEP_AXES:
            raise ConfigError("sweep", f"unknown axis {self.sweep!r}; expected one of {', '.join(SWEEP_AXES)}")
        if self.sweep_k is not None and self.sweep_k[1] < self.sweep_k[0]:
            raise ConfigError("sweep_k", "empty range")
        if self.h_base_n < 1:
            raise ConfigError("h_base_n", "must be a positive integer")
        if self.checkpoint not in ("none", "final", "all"):
            raise ConfigError("checkpoint", f"unknown policy {self.checkpoint!r}")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if any(t < 0 for t in self.snapshot_times):
            raise ConfigError("snapshot_times", "times must be non-negative (times past T are skipped)")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def dumps(self):
        """Effective configuration in the same key-value format (reloads to an equal config)."""
        lines = [f"[{SECTION}]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "sweep_k":
                text = f"{v[0]}..{v[1]}"
            elif isinstance(v, tuple):
                text = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, text):
    default = getattr(RunConfig, key, None)
    try:
        if key in RunConfig._parsers:
            return RunConfig._parsers[key](text)
        if isinstance(default, bool):
            return _bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def parse_config(text, **overrides) -> RunConfig:
    """Parse key-value text; unknown keys raise :class:`ConfigError` naming the key."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    body = text if text.lstrip().startswith("[") else f"[{SECTION}]\n{text}"
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    values = {}
    for section in cp.sections():
        if section != SECTION:
            raise ConfigError(section, "unknown section")
        for key, raw in cp.items(section):
            if key not in _FIELD_TYPES or key.startswith("_"):
                raise ConfigError(key, "unknown key")
            values[key] = _coerce(key, raw)
    preset = overrides.get("preset") or values.get("preset") or "annulus"
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    merged = {**PRESETS[preset], **values, **{k: v for k, v in overrides.items() if v is not None}}
    return RunConfig(**merged)


def load_config(path=None, out_dir=None, **overrides) -> RunConfig:
    """Read ``path`` (None for defaults), validate, and echo the effective config to ``out_dir``."""
    text = "" if path is None else Path(path).read_text()
    cfg = parse_config(text, **overrides)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.ini").write_text(cfg.dumps())
    return cfg


PRESETS = {
    "annulus": {},
    # desk-scale discretisations of each scaling study
    "gamma-study": {"sweep": "gamma", "n": 64, "tau": 5e-4},
    "h-study": {"sweep": "h", "gamma": 2.0**-4, "tau": 2.5e-4, "h_base_n": 8},
    "tau-study": {"sweep": "tau", "gamma": 2.0**-4, "n": 64},
    "eigen-study": {"sweep": "eigen", "n": 64, "tau": 5e-4},
    "M-study": {"sweep": "Mcomponents", "n": 64, "tau": 5e-4},
    "steady": {"preset": "steady", "T": 0.01, "tau": 1e-3, "n": 8},
}
