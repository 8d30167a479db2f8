"""Run configuration files: ``[section]`` headers with ``key = value`` lines.

Unknown sections or keys fail fast, and every referenced file must exist at
parse time.  Paths are resolved relative to the config file's directory.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .optim import DpSgdConfig
from .scheduling import SchedulerConfig
from .training import MODES

_RUN_KEYS = {"seed", "epochs", "mode", "eps_target", "delta", "val_fraction"}
_DATA_KEYS = {"source", "n_classes", "n_per_class", "dim", "separation",
              "images", "labels"}
_ARCH_KEYS = {"file", "layers", "input"}
_DPSGD_KEYS = {"eta", "clip_norm", "sigma", "logical_batch", "physical_batch"}
_SCHED_KEYS = {"k", "temperature", "n_sample", "n_interval", "repetitions",
               "sigma_measure", "clip_measure", "ema_decay"}
_QUANT_KEYS = {"mode"}

_SECTION_KEYS = {
    "run": _RUN_KEYS,
    "data": _DATA_KEYS,
    "arch": _ARCH_KEYS,
    "dpsgd": _DPSGD_KEYS,
    "scheduler": _SCHED_KEYS,
    "quantizer": _QUANT_KEYS,
}


@dataclass
class RunConfig:
    seed: int
    epochs: int
    mode: str
    eps_target: float
    delta: float
    val_fraction: float
    data: dict
    arch_text: str
    input_shape: tuple
    dp: DpSgdConfig
    scheduler: SchedulerConfig
    quantizer_mode: str


def _read_ini(path: Path, allowed_sections) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} does not exist")
    for section in parser.sections():
        if section not in allowed_sections:
            raise ConfigError(f"{path}: unknown section [{section}]")
        allowed = allowed_sections[section]
        for key in parser[section]:
            if key not in allowed:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in [{section}]"
                )
    return parser


def _get(parser, section, key, cast, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key {key!r} in [{section}]")
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: cannot parse")


def _parse_shape(token: str) -> tuple:
    parts = token.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad input shape {token!r}; use e.g. 1x14x14 or 196")
    if any(d <= 0 for d in dims) or len(dims) not in (1, 3):
        raise ConfigError(f"input shape must be D or CxHxW, got {token!r}")
    return dims


def load_run_config(path) -> RunConfig:
    path = Path(path)
    parser = _read_ini(path, _SECTION_KEYS)
    base = path.parent

    mode = _get(parser, "run", "mode", str, required=True)
    if mode not in MODES:
        raise ConfigError(f"[run] mode must be one of {MODES}, got {mode!r}")
    eps_target = _get(parser, "run", "eps_target", float, default=math.inf)
    run = dict(
        seed=_get(parser, "run", "seed", int, default=0),
        epochs=_get(parser, "run", "epochs", int, default=10),
        mode=mode,
        eps_target=eps_target,
        delta=_get(parser, "run", "delta", float, default=1e-5),
        val_fraction=_get(parser, "run", "val_fraction", float, default=0.1),
    )

    source = _get(parser, "data", "source", str, required=True)
    if source == "synth":
        data = dict(
            source="synth",
            n_classes=_get(parser, "data", "n_classes", int, default=10),
            n_per_class=_get(parser, "data", "n_per_class", int, default=1000),
            dim=_get(parser, "data", "dim", int, default=196),
            separation=_get(parser, "data", "separation", float, default=3.0),
        )
    elif source == "idx":
        images = base / _get(parser, "data", "images", str, required=True)
        labels = base / _get(parser, "data", "labels", str, required=True)
        for p in (images, labels):
            if not p.exists():
                raise ConfigError(f"referenced data file {p} does not exist")
        data = dict(
            source="idx", images=images, labels=labels,
            n_classes=_get(parser, "data", "n_classes", int),
        )
    else:
        raise ConfigError(f"[data] source must be synth or idx, got {source!r}")

    if parser.has_option("arch", "file"):
        arch_path = base / parser.get("arch", "file")
        if not arch_path.exists():
            raise ConfigError(f"architecture file {arch_path} does not exist")
        arch_text = arch_path.read_text()
    elif parser.has_option("arch", "layers"):
        arch_text = parser.get("arch", "layers")
    else:
        raise ConfigError("[arch] needs either file= or layers=")
    input_shape = _parse_shape(
        _get(parser, "arch", "input", str, required=True)
    )

    dp = DpSgdConfig(
        eta=_get(parser, "dpsgd", "eta", float, default=0.5),
        clip_norm=_get(parser, "dpsgd", "clip_norm", float, default=1.0),
        sigma=_get(parser, "dpsgd", "sigma", float, default=1.0),
        logical_batch=_get(parser, "dpsgd", "logical_batch", int, default=256),
        physical_batch=_get(parser, "dpsgd", "physical_batch", int,
                            default=128),
    )
    sched = SchedulerConfig(
        k=_get(parser, "scheduler", "k", int, default=1),
        temperature=_get(parser, "scheduler", "temperature", float,
                         default=8.0),
        n_sample=_get(parser, "scheduler", "n_sample", int, default=1),
        n_interval=_get(parser, "scheduler", "n_interval", int, default=2),
        repetitions=_get(parser, "scheduler", "repetitions", int, default=2),
        sigma_measure=_get(parser, "scheduler", "sigma_measure", float,
                           default=0.5),
        clip_measure=_get(parser, "scheduler", "clip_measure", float,
                          default=0.01),
        ema_decay=_get(parser, "scheduler", "ema_decay", float, default=0.5),
    )
    if mode != "baseline_fp" and not parser.has_option("scheduler", "k"):
        raise ConfigError(f"mode {mode!r} requires [scheduler] k")

    qmode = _get(parser, "quantizer", "mode", str, default="stochastic")
    if qmode not in ("stochastic", "identity"):
        raise ConfigError(
            f"[quantizer] mode must be stochastic or identity, got {qmode!r}"
        )

    return RunConfig(
        **run, data=data, arch_text=arch_text, input_shape=input_shape,
        dp=dp, scheduler=sched, quantizer_mode=qmode,
    )


# Auxiliary configs for the non-training CLI verbs.

_TOOL_SECTIONS = {
    "accountant": {"ledger", "delta"},
    "speedup": {"t_train", "t_overhead", "overhead_pct", "t_analysis",
                "quantized_fraction", "factor"},
    "quantizer-stats": {"dim", "vectors", "trials", "seed"},
}


def load_tool_config(path, section: str) -> dict:
    path = Path(path)
    parser = _read_ini(path, {section: _TOOL_SECTIONS[section]})
    if not parser.has_section(section):
        raise ConfigError(f"{path}: missing [{section}] section")
    return {"_base": path.parent, **dict(parser[section])}
