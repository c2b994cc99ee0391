"""Flat key=value run configuration with section prefixes.

One dataclass holds every knob for every subcommand, named
``<section>_<key>``.  Files are plain ``key = value`` lines with ``#``
comments; unknown keys are rejected so typos fail loudly instead of
silently running defaults.  Values parse by the declared field type, and
``dump`` round-trips exactly, which is what makes resolved-config files
and config hashes trustworthy provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

__all__ = ["ConfigError", "RunConfig", "parse_text", "load_config",
           "apply_overrides", "dump", "write_resolved", "config_hash"]


class ConfigError(ValueError):
    """Unknown key, malformed line, or unparseable value."""


@dataclass
class RunConfig:
    # environment
    env_randomize: bool = False

    # demonstration corpus
    dataset_episodes: int = 400
    dataset_steps: int = 1000
    dataset_horizon: int = 11
    dataset_stride: int = 5
    dataset_speed_max: float = 1.0
    dataset_yaw_max: float = 1.0
    dataset_posture_jitter: float = 0.15
    dataset_freq_min: float = 1.2
    dataset_freq_max: float = 1.8
    dataset_stand_frac: float = 0.05
    dataset_switch_frac: float = 0.35
    dataset_seed: int = 0
    dataset_path: str = "data/corpus.dpb"

    # diffusion prior
    model_hidden: tuple = (256, 256)
    model_embed_dim: int = 16
    model_levels: int = 50
    model_beta_start: float = 1e-4
    model_beta_end: float = 0.2
    model_train_steps: int = 6000
    model_batch: int = 128
    model_lr: float = 1e-3
    model_seed: int = 0
    model_path: str = "data/prior.dpb"

    # learned height reward
    reward_hidden: tuple = (64, 64)
    reward_train_steps: int = 2000
    reward_batch: int = 64
    reward_lr: float = 1e-3
    reward_seed: int = 0
    reward_path: str = "data/reward_height.dpb"

    # planner (the `plan` subcommand and shared planning defaults)
    planner_task: str = "track"
    planner_candidates: int = 1
    planner_use_reward: bool = False
    planner_use_constraints: bool = False
    planner_guide_scale: float = -1.0    # negative -> the task preset's gain
    planner_n_inference: int = 10
    planner_deterministic: bool = False
    planner_seed: int = 0
    planner_model: str = "data/prior.dpb"
    planner_out: str = "data/plan.txt"

    # interactive finetuning
    trainer_iterations: int = 200
    trainer_episodes: int = 4
    trainer_steps: int = 160
    trainer_stride: int = 5
    trainer_batch: int = 32
    trainer_mix_fresh: float = 0.5
    trainer_buffer: int = 10000
    trainer_lr: float = 3e-4
    trainer_speed_limit: float = 1.0
    trainer_speed_floor: float = 0.3
    trainer_yaw_limit: float = 1.0
    trainer_candidates: int = 4
    trainer_randomize: bool = True
    trainer_uniform: bool = False
    trainer_temperature: float = 0.0     # 0 -> adaptive from return spread
    trainer_temp_floor: float = 0.05
    trainer_window: int = 50
    trainer_plan_every: int = 8
    trainer_seed: int = 0
    trainer_out: str = "data/finetuned.dpb"
    trainer_curve: str = "data/finetune_curve.csv"

    # real-time executor / deployment ablation
    executor_horizon: int = 11
    executor_margin: int = 3
    executor_cached: int = 7
    executor_refresh_every: int = 10
    executor_refresh_on_command: bool = True
    executor_step_cost: float = 0.005
    executor_stall_factor: float = 2.0
    executor_control_period: float = 0.02
    executor_threaded: bool = False
    executor_measure_ticks: int = 1200
    executor_measure_speed: float = 0.5
    executor_phase_gate: float = 0.5
    executor_seed: int = 0
    executor_model: str = "data/finetuned.dpb"
    executor_out: str = "data/deploy.csv"

    # adaptation evaluation grid
    eval_tasks: str = "joint_vel,joint_range,energy"
    eval_candidates: tuple = (1, 10, 100)
    eval_seeds: int = 200
    eval_steps: int = 160
    eval_plan_every: int = 8
    eval_randomize: bool = False
    eval_tracking_gate: float = 0.97
    eval_model: str = "data/prior.dpb"
    eval_reward_model: str = ""          # needed only for the height task
    eval_seed: int = 0
    eval_out: str = "data/adaptation.csv"

    # plotting
    plot_source: str = "data/adaptation.csv"
    plot_out: str = "data/adaptation.svg"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_value(name: str, text: str):
    field = _FIELDS[name]
    default = getattr(_DEFAULTS, name)
    text = text.strip()
    try:
        if field.type == "bool" or isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if text == "":
                return ()
            parts = [p.strip() for p in text.split(",")]
            try:
                return tuple(int(p) for p in parts)
            except ValueError:
                return tuple(float(p) for p in parts)
        return text
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines on top of ``base`` (defaults if None)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    cfg = base or RunConfig()
    return cfg.replace(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, base)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply CLI ``key=value`` strings on top of a config."""
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    return cfg.replace(**values)


def dump(cfg: RunConfig) -> str:
    """Canonical text form: one line per field, declaration order."""
    lines = [f"{name} = {_format_value(getattr(cfg, name))}"
             for name in _FIELDS]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump(cfg).encode("ascii")).hexdigest()[:16]


def write_resolved(cfg: RunConfig, primary_output: str) -> str:
    """Write the resolved config next to a subcommand's primary output.

    The sidecar is ``<output>.cfg``; returns its path.
    """
    path = str(primary_output) + ".cfg"
    body = dump(cfg)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# resolved configuration sha256:{config_hash(cfg)}\n")
        fh.write(body)
    return path
