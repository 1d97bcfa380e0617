# src/sdacc_sim/config.py
"""
Run configuration from TOML files and ``--set`` overrides.

Tables: ``[hardware]``, ``[switches]``, ``[scheduler]``, ``[phase]``, ``[run]``.
Override values are coerced to the type of the field's default; a bare key is
looked up in hardware first, then switches.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore

from .errors import ConfigError, SimulatorError
from .phase import PhaseConfig, SearchConstraints
from .scheduler import SchedulerConfig
from .simcore import HARDWARE_PRESETS, AblationSwitches, HardwareConfig
from .workload import COST_BASES, MODEL_IDS

logger = logging.getLogger(__name__)

SECTIONS = ("hardware", "switches", "scheduler", "phase", "run")
# [scheduler] keys and the hardware fields they set.
SCHEDULER_KEYS = {"buffer_bytes": "global_buffer_bytes", "resident_share": "resident_share"}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunOptions:
    model: str = "sd14"
    topology: str = ""
    latent: int = 0
    timesteps: int = 50
    cost_basis: str = "profiled"
    hardware_preset: str = "default"
    out_dir: str = "results"
    cfg: bool = False
    trace: str = ""
    # Parameters of the synthetic trace written by the `trace` command.
    seed: int = 0
    synth_noise: float = 0.05
    synth_transition: int = 20
    # Sampling plan for simulate: a preset name or a plan file.
    preset: str = ""
    plan: str = ""
    # Plan-search constraints; zero leaves a constraint unset.
    min_reduction: float = 0.0
    max_depth_budget: int = 0
    min_refine_depth: int = 0

    def validate(self) -> None:
        if not self.topology and self.model not in MODEL_IDS:
            raise ConfigError(f"run.model must be one of {MODEL_IDS}, got '{self.model}'")
        if self.cost_basis not in COST_BASES:
            raise ConfigError(f"run.cost_basis must be one of {COST_BASES}, got '{self.cost_basis}'")
        if self.hardware_preset not in HARDWARE_PRESETS:
            raise ConfigError(f"run.hardware_preset must be one of {sorted(HARDWARE_PRESETS)}")
        if self.timesteps < 3:
            raise ConfigError(f"run.timesteps must be >= 3, got {self.timesteps}")
        if self.latent < 0:
            raise ConfigError(f"run.latent must be non-negative, got {self.latent}")
        if self.synth_noise < 0:
            raise ConfigError(f"run.synth_noise must be non-negative, got {self.synth_noise}")
        if self.preset and self.plan:
            raise ConfigError("run.preset and run.plan are mutually exclusive")
        for name in ("trace", "topology", "plan"):
            value = getattr(self, name)
            if value and not Path(value).is_file():
                raise ConfigError(f"run.{name}: file not found: {value}")

    def constraints(self) -> SearchConstraints:
        """Search constraints; with none set every plan reducing MACs at all qualifies."""
        found = SearchConstraints(
            min_reduction=self.min_reduction or None,
            max_depth_budget=self.max_depth_budget or None,
            min_refine_depth=self.min_refine_depth or None,
        )
        return SearchConstraints(min_reduction=1.0) if found.is_empty() else found


@dataclass
class RunConfig:
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    run: RunOptions = field(default_factory=RunOptions)

    @property
    def scheduler(self) -> SchedulerConfig:
        return self.hardware.scheduler_config()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hardware": asdict(self.hardware),
            "switches": asdict(self.switches),
            "scheduler": asdict(self.scheduler),
            "phase": asdict(self.phase),
            "run": asdict(self.run),
        }


def coerce(default: Any, value: Any, key: str) -> Any:
    """Convert ``value`` (TOML value or override string) to the type of ``default``."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got '{value}'")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value) if not isinstance(value, str) else int(value.replace("_", ""), 0)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError("boolean is not a number")
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot use '{value}' as {type(default).__name__}: {e}") from e
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _defaults(section: str) -> Dict[str, Any]:
    if section == "hardware":
        return asdict(HardwareConfig())
    if section == "switches":
        return asdict(AblationSwitches())
    if section == "scheduler":
        hw = HardwareConfig()
        return {key: getattr(hw, attr) for key, attr in SCHEDULER_KEYS.items()}
    if section == "phase":
        return asdict(PhaseConfig())
    return asdict(RunOptions())


def _resolve_key(dotted: str) -> Tuple[str, str]:
    if "." in dotted:
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section '{section}', expected one of {SECTIONS}")
        return section, key
    for section in ("hardware", "switches"):
        if dotted in _defaults(section):
            return section, dotted
    raise ConfigError(f"Unknown config key '{dotted}' (not a hardware or switches field)")


def parse_override(text: str) -> Tuple[str, str, str]:
    """Split ``section.key=value`` (or ``key=value``) into its parts."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    dotted, value = text.split("=", 1)
    section, key = _resolve_key(dotted.strip())
    return section, key, value.strip()


def _read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Failed to parse {path}: {e}") from e
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown tables {sorted(unknown)}, expected {SECTIONS}")
    for section, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Build a RunConfig from an optional TOML file, then apply ``overrides`` in order."""
    raw: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    if path is not None:
        for section, table in _read_toml(path).items():
            raw[section].update(table)
    for text in overrides:
        section, key, value = parse_override(text)
        raw[section][key] = value

    values: Dict[str, Dict[str, Any]] = {}
    for section in SECTIONS:
        defaults = _defaults(section)
        values[section] = {}
        for key, value in raw[section].items():
            if key not in defaults:
                raise ConfigError(f"Unknown key '{section}.{key}'")
            values[section][key] = coerce(defaults[key], value, f"{section}.{key}")

    hw_values = dict(values["hardware"])
    for key, attr in SCHEDULER_KEYS.items():
        if key in values["scheduler"]:
            if attr in hw_values and hw_values[attr] != values["scheduler"][key]:
                raise ConfigError(f"scheduler.{key} conflicts with hardware.{attr}")
            hw_values[attr] = values["scheduler"][key]

    try:
        run = RunOptions(**values["run"])
        run.validate()
        hardware = HARDWARE_PRESETS[run.hardware_preset](**hw_values)
        config = RunConfig(
            hardware=hardware,
            switches=AblationSwitches(**values["switches"]),
            phase=PhaseConfig(**values["phase"]),
            run=run,
        )
    except ConfigError:
        raise
    except (SimulatorError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug(f"Resolved configuration: {config.to_dict()}")
    return config


def default_config_dict() -> Dict[str, Any]:
    return RunConfig().to_dict()
