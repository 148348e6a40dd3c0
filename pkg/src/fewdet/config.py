"""Run configuration: key=value config files plus command line overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


class ConfigurationError(Exception):
    """Invalid configuration; the CLI maps this to exit code 2."""


MODES = ("gradcheck", "oracle", "meta_train", "fine_tune", "eval", "ablate", "export_data")


@dataclass
class RunConfig:
    mode: str = "eval"
    use_drd: bool = True
    use_cfa: bool = True
    cfa_attention: bool = True
    baseline_reweight: bool = False
    k: int = 5
    split_id: int = 0
    num_runs: int = 10
    seed: int = 0
    dataset_seed: int = 1234
    precision: str = "f32"
    # (iterations, lr) pairs; proportional shrink of a two-stage step schedule
    meta_schedule: tuple = ((5000, 0.005), (1000, 0.0005))
    finetune_schedule: tuple = ((400, 0.005), (100, 0.0005))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    checkpoint: str = ""
    out: str = ""
    num_eval_images: int = 200
    debug_jsonl: str = ""

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.use_drd and self.baseline_reweight:
            raise ConfigurationError("use_drd and baseline_reweight are mutually exclusive")
        for name in ("meta_schedule", "finetune_schedule"):
            sched = getattr(self, name)
            if not sched:
                raise ConfigurationError(f"{name} must be non-empty")
            for steps, lr in sched:
                if steps < 0 or lr <= 0:
                    raise ConfigurationError(f"{name} entries need steps >= 0 and lr > 0, got ({steps}, {lr})")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.num_runs < 1:
            raise ConfigurationError(f"num_runs must be >= 1, got {self.num_runs}")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.split_id not in (0, 1, 2):
            raise ConfigurationError(f"split_id must be 0, 1 or 2, got {self.split_id}")
        return self

    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "f32" else np.float64

    def as_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(map(list, v)) if f.name.endswith("schedule") else v
        return d


def _parse_schedule(text):
    # "5000:0.005,1000:0.0005"
    pairs = []
    for part in text.split(","):
        steps, lr = part.split(":")
        pairs.append((int(steps), float(lr)))
    return tuple(pairs)


def _parse_value(name, text, current):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return _parse_schedule(text)
    return text


def load_config(path, base=None):
    """Parse a key=value file ('#' comments allowed) into a RunConfig."""
    cfg = base if base is not None else RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected KEY=VALUE, got {raw.rstrip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                parsed = _parse_value(key, value, getattr(cfg, key))
            except (ValueError, ConfigurationError) as e:
                raise ConfigurationError(f"{path}:{lineno}: {e}") from None
            cfg = replace(cfg, **{key: parsed})
    return cfg
