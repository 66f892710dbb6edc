"""Run configuration: an INI-style file with one section per concern."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from .freeze import FreezePolicy
from .federation import FLConfig
from .nn import SgdConfig

MODES = ("profl", "oracle", "allsmall", "exclusive")
MIB = 1024 * 1024


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # [run]
    mode: str = "profl"
    seed: int = 0
    out: str = "runs/default"
    T: int = 3
    cache_frozen: bool = False
    shrinking: bool = True
    workers: int = 1
    # [data]
    source: str = "gaussian"
    classes: int = 4
    dims: int = 16
    samples_per_class: int = 1250
    spread: float = 1.0
    modes_per_class: int = 1
    center_scale: float = 1.0
    test_samples: int = 1000
    alpha: float | None = 1.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # [model]
    hidden: tuple[int, ...] = (32, 32, 32)
    # [pool]
    devices: int = 100
    select: int = 20
    budget_unit: str = "relative"
    budget_low: float = 0.15
    budget_high: float = 1.35
    # [sgd]
    lr: float = 0.01
    batch_size: int = 32
    local_epochs: int = 5
    # [freeze]
    window: int = 10
    phi: float = 0.15
    patience: int = 20
    min_rounds: int | None = None
    slope_window: int | None = None
    round_cap: int = 300
    # [distill]
    distill_rounds: int = 30
    distill_epochs: int = 1
    distill_lr: float = 0.01
    distill_tol: float = 1e-6
    # [baseline]
    baseline_rounds: int = 200

    def fl_config(self) -> FLConfig:
        return FLConfig(
            n_devices=self.devices,
            select=self.select,
            sgd=SgdConfig(self.lr, self.batch_size, self.local_epochs),
            window=self.window,
            policy=FreezePolicy(self.phi, self.patience, self.min_rounds, self.slope_window),
            round_cap=self.round_cap,
            distill_rounds=self.distill_rounds,
            distill_epochs=self.distill_epochs,
            distill_lr=self.distill_lr,
            distill_tol=self.distill_tol,
            baseline_rounds=self.baseline_rounds,
            cache_frozen=self.cache_frozen,
            shrinking=self.shrinking,
            workers=self.workers,
            seed=self.seed,
        )


SECTIONS = {
    "run": ["mode", "seed", "out", "T", "cache_frozen", "shrinking", "workers"],
    "data": [
        "source", "classes", "dims", "samples_per_class", "spread", "modes_per_class",
        "center_scale", "test_samples", "alpha", "train_images", "train_labels",
        "test_images", "test_labels",
    ],
    "model": ["hidden"],
    "pool": ["devices", "select", "budget_unit", "budget_low", "budget_high"],
    "sgd": ["lr", "batch_size", "local_epochs"],
    "freeze": ["window", "phi", "patience", "min_rounds", "slope_window", "round_cap"],
    "distill": ["distill_rounds", "distill_epochs", "distill_lr", "distill_tol"],
    "baseline": ["baseline_rounds"],
}
# keys inside [distill]/[baseline] are written without their prefix
_ALIASES = {
    ("distill", "rounds"): "distill_rounds",
    ("distill", "epochs"): "distill_epochs",
    ("distill", "lr"): "distill_lr",
    ("distill", "tol"): "distill_tol",
    ("baseline", "rounds"): "baseline_rounds",
}

_DEFAULTS = RunConfig()


def _parse(name: str, raw: str):
    default = getattr(_DEFAULTS, name)
    raw = raw.strip()
    try:
        if name == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if name == "alpha":
            return None if raw.lower() in ("iid", "none", "") else float(raw)
        if name in ("min_rounds", "slope_window"):
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from None


def check(cfg: RunConfig) -> None:
    """Raise ConfigError on the first invalid field."""
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
    if cfg.source not in ("gaussian", "idx"):
        raise ConfigError("source", "must be 'gaussian' or 'idx'")
    if cfg.budget_unit not in ("relative", "bytes", "mb"):
        raise ConfigError("budget_unit", "must be relative, bytes or mb")
    if not cfg.hidden or min(cfg.hidden) < 1:
        raise ConfigError("hidden", "need at least one positive width")
    positive = ["classes", "dims", "samples_per_class", "modes_per_class", "devices", "select",
                "batch_size", "window", "patience", "round_cap", "workers"]
    for key in positive:
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    for key in ("local_epochs", "distill_rounds", "distill_epochs", "baseline_rounds", "test_samples"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be >= 0")
    if cfg.lr < 0 or cfg.distill_lr < 0:
        raise ConfigError("lr", "learning rates must be non-negative")
    if not 0 < cfg.phi < 1:
        raise ConfigError("phi", "must lie in (0, 1)")
    if cfg.alpha is not None and cfg.alpha <= 0:
        raise ConfigError("alpha", "must be positive (or 'iid')")
    if not 0 < cfg.budget_low <= cfg.budget_high:
        raise ConfigError("budget_low", "need 0 < budget_low <= budget_high")
    if cfg.slope_window is not None and cfg.slope_window < 2:
        raise ConfigError("slope_window", "must be >= 2")
    if cfg.spread < 0:
        raise ConfigError("spread", "must be >= 0")
    if cfg.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(key, "required when source = idx")


def load_config(path: str | Path, **overrides) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            name = _ALIASES.get((section, key), key)
            if name not in SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[name] = _parse(name, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = replace(_DEFAULTS, **values)
    check(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    inverse = {v: k[1] for k, v in _ALIASES.items()}
    lines = []
    for section, names in SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            v = getattr(cfg, name)
            if name == "hidden":
                v = ",".join(str(w) for w in v)
            elif v is None:
                v = "iid" if name == "alpha" else "none"
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{inverse.get(name, name)} = {v}")
        lines.append("")
    return "\n".join(lines)
