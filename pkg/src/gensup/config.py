"""Run configuration: defaults, plain-text config files, --set overrides.

The resolved configuration is serialized verbatim into every output
directory so any artifact can be traced back to the exact settings.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

SCALES = ("desk", "paper", "ablation")
MODES = ("depth", "rgb", "e2e", "sft")


@dataclass
class RunConfig:
    seed: int = 0
    scale: str = "desk"
    mode: str = "depth"
    data_dir: str = "data"
    out_dir: str = "runs/out"
    eval_frac: float = 0.16
    lam: float = 0.1            # flow-loss weight in joint stages
    grad_clip: float = 1.0
    sampler_steps: int = 20
    # model dims
    dim: int = 128
    layers: int = 4
    heads: int = 4
    horizon: int = 8
    layerwise: bool = True
    # stage overrides; 0 / 0.0 means "use the scale default"
    stage1_steps: int = 0
    stage2_steps: int = 0
    stage3_steps: int = 0
    batch_size: int = 0
    stage1_lr: float = 0.0
    stage2_lr: float = 0.0
    stage3_lr: float = 0.0
    # vla fine-tuning
    vla_steps: int = 2000
    vla_batch: int = 16
    vla_lr: float = 1e-3
    vla_episodes: int = 400
    vla_eval_episodes: int = 50
    rollout_horizon: int = 40

    def validate(self) -> "RunConfig":
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        return self


def _parse_value(field_type, raw: str):
    if field_type is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    return field_type(raw)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply `key=value` strings (the CLI --set syntax) in order."""
    by_name = {f.name: f for f in fields(RunConfig)}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key == "lambda":  # CLI alias for the loss weight
            key = "lam"
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(type(getattr(cfg, key)), raw.strip()))
    return cfg


def load_config(path: str | Path | None = None, sets: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    pairs = []
    if path is not None:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                pairs.append(line)
    pairs.extend(sets or [])
    apply_overrides(cfg, pairs)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def save_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
