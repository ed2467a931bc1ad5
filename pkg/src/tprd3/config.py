"""Run configuration: flat key=value files, overrides, canonical manifest.

A config file is plain text, one `key=value` per line, '#' starts a comment.
Unknown keys are rejected. parse_config also accepts a manifest.json (a flat
JSON object of the same keys), so a run's manifest feeds back into the CLI
unchanged. Precedence: file < explicit overrides < TPRD3_SEED env < --seed.
"""

import json
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .fwm import VARIANTS


def _to_bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _to_int(s):
    try:
        return int(str(s).strip())
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _to_float(s):
    try:
        return float(str(s).strip())
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None


def _to_str(s):
    return str(s).strip()


@dataclass
class RunConfig:
    seed: int = 0
    v: int = 20
    episode_len: int = 20
    batch: int = 64
    iterations: int = 3000
    eval_every: int = 100
    variant: str = "fwm-d3-woF"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    d_code: int = 32
    n_code: int = 64
    top_k: int = 8
    d_query: int = 0  # 0 derives d_code // 2
    p_dropout: float = 0.1
    use_codebook: bool = True
    use_residual: bool = True
    ffn_sharing: str = "global"
    # desk-scale controller/memory widths; full-scale values (256/32) remain
    # configurable but exceed the 20-minute single-core training budget
    d_lstm: int = 32
    d_fwm: int = 16
    n_reads: int = 1
    flag_mode: str = "constant"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("v", "episode_len", "batch", "eval_every", "d_lstm", "d_fwm"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.episode_len > self.v:
            raise ConfigError(
                f"episode_len={self.episode_len} exceeds v={self.v}; the eval pass "
                "needs distinct x-ids within an episode")
        if self.d_query == 0:
            if self.d_code % 2:
                raise ConfigError(f"d_query defaults to d_code/2 but d_code={self.d_code} is odd")
            self.d_query = self.d_code // 2
        if self.top_k > self.n_code:
            raise ConfigError(f"top_k={self.top_k} exceeds n_code={self.n_code}")
        if not (0.0 <= self.p_dropout < 1.0):
            raise ConfigError(f"p_dropout must be in [0, 1), got {self.p_dropout}")
        if not (self.use_codebook or self.use_residual):
            raise ConfigError("use_codebook and use_residual cannot both be false")
        if self.flag_mode not in ("start", "constant"):
            raise ConfigError(f"flag_mode must be 'start' or 'constant', got {self.flag_mode!r}")
        if self.n_reads != 1:
            raise ConfigError("only n_reads=1 is supported")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


_CONVERTERS = {}
for f in fields(RunConfig):
    _CONVERTERS[f.name] = {int: _to_int, float: _to_float, bool: _to_bool, str: _to_str}[f.type]


def _parse_lines(text, source):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(path=None, overrides=None, seed=None):
    """Build a RunConfig from an optional file plus override mappings.

    `overrides` maps key -> raw string (or typed value). `seed`, if not None,
    wins over everything, including the TPRD3_SEED environment variable.
    """
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from None
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: JSON config must be an object")
            raw.update({str(k): v for k, v in loaded.items()})
        else:
            raw.update(_parse_lines(text, path))
    if overrides:
        for key, value in overrides.items():
            raw[str(key)] = value
    env_seed = os.environ.get("TPRD3_SEED")
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"TPRD3_SEED must be an integer, got {env_seed!r}")
    if seed is not None:
        raw["seed"] = seed
    kwargs = {}
    for key, value in raw.items():
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown config key: {key!r}")
        kwargs[key] = _CONVERTERS[key](value)
    return RunConfig(**kwargs)


def config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}


def manifest_json(cfg):
    """Canonical JSON for the run manifest: sorted keys, no whitespace drift."""
    return json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ": ")) + "\n"


def parse_overrides(pairs):
    """key=value strings (CLI positionals) -> override dict."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out
