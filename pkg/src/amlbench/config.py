"""Run configuration: a flat key=value file with [section] headers.

Section headers only namespace the keys (``[train]`` + ``steps=`` becomes
``train.steps``); resolution is a pure function of (file bytes, argv
overrides). Unknown keys, bad types, and out-of-range values are all
reported together.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from . import flow, g3t, toyworld


class ConfigValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str = "train"
    head: str = flow.ACTION
    strategy: str = g3t.G3T
    observe: str = "state"  # state | views
    chunk_h: int = 8
    denoise_steps: int = 4  # default matches the 4-step denoising setting
    train_steps: int = 1500
    warmup_steps: int = 100
    batch: int = 64
    batch_views: int = 16
    lr: float = 3e-3
    tau_max: float = 0.9
    weight_decay: float = 1e-8
    gate_weight_decay: float = 0.5
    grad_clip: float = 10.0
    width: int = 128
    blocks: int = 4
    time_dim: int = 32
    fusion_c: int = 64
    heads: int = 4
    pos_emb: bool = True
    episodes: int = 48
    rollouts: int = 200
    layout_spread: float = 1.0
    depth_noise_std: float = 0.25
    view_noise_std: float = 0.05
    mono_noise_std: float = 0.25
    occlude_side: str = "none"  # none | left | right
    occlude_noise_std: float = 1.0
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    grid_kinds: tuple = (flow.ACTION, flow.VELOCITY)
    grid_steps: tuple = (2, 4, 10)
    grid_chunks: tuple = (8, 10, 30)
    strategies: tuple = g3t.STRATEGIES
    gate_scenes: int = 32
    probe_train_scenes: int = 48
    probe_test_scenes: int = 24
    perturb_kind: str = "none"
    perturb_magnitude: float = 0.0
    out: str = "runs"
    quiet: bool = False

    def occlusion_config(self) -> toyworld.OcclusionConfig:
        return toyworld.OcclusionConfig(side=self.occlude_side, noise_std=self.occlude_noise_std)

    def perturbation(self) -> toyworld.PerturbationSpec:
        return toyworld.PerturbationSpec(self.perturb_kind, self.perturb_magnitude)


_COMMANDS = ("gen-data", "train", "eval", "ablate", "fusion-ablate", "depth-probe",
             "export-gates", "report", "selftest")

_ENUMS = {
    "head": flow.KINDS,
    "strategy": g3t.STRATEGIES,
    "observe": ("state", "views"),
    "occlude_side": ("none", "left", "right"),
    "perturb_kind": ("none", "camera", "noise", "light", "layout"),
}

_POSITIVE_INT = ("chunk_h", "denoise_steps", "batch", "batch_views", "width", "blocks",
                 "episodes", "rollouts", "gate_scenes", "probe_train_scenes", "probe_test_scenes")


def _parse_value(name: str, kind, raw: str):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            try:
                return tuple(int(p) for p in parts)
            except ValueError:
                return tuple(parts)
        return raw
    except ValueError:
        raise ConfigValidationError(f"key '{name}': expected {kind.__name__}, got '{raw}'") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    schema = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    errors = []
    updates = {}
    section = ""
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: not a key=value pair: '{line}'")
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        name = f"{section}.{key}" if section else key
        # sections are namespacing only; the dataclass is flat
        flat = name.split(".")[-1]
        if flat not in schema:
            errors.append(f"unknown key '{name}'")
            continue
        try:
            updates[flat] = _parse_value(flat, types[flat], raw.strip())
        except ConfigValidationError as e:
            errors.append(str(e))
    if errors:
        raise ConfigValidationError("; ".join(errors))
    cfg = RunConfig(**{**vars(cfg), **updates})
    validate_config(cfg)
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read(), base)


def validate_config(cfg: RunConfig):
    errors = []
    for key, allowed in _ENUMS.items():
        if getattr(cfg, key) not in allowed:
            errors.append(f"key '{key}': '{getattr(cfg, key)}' not in {allowed}")
    for key in _POSITIVE_INT:
        if getattr(cfg, key) < 1:
            errors.append(f"key '{key}': must be >= 1, got {getattr(cfg, key)}")
    if not cfg.seeds:
        errors.append("key 'seeds': must be non-empty")
    for k in cfg.grid_kinds:
        if k not in flow.KINDS:
            errors.append(f"key 'grid_kinds': unknown kind '{k}'")
    for s in cfg.strategies:
        if s not in g3t.STRATEGIES:
            errors.append(f"key 'strategies': unknown strategy '{s}'")
    if cfg.train_steps < 0:
        errors.append("key 'train_steps': must be >= 0")
    if cfg.perturb_magnitude < 0:
        errors.append("key 'perturb_magnitude': must be >= 0")
    if errors:
        raise ConfigValidationError("; ".join(errors))


def config_echo(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_echo(cfg).encode()).hexdigest()
