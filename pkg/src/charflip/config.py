"""Run configuration: defaults, profiles, key=value config files, overrides.

One flat namespace of typed keys with two built-in profiles (``desk`` for
CI-sized runs, ``paper`` for full-scale dimensions). Sources of truth are
applied in order: defaults -> profile -> config file -> --set overrides,
so flags always win. The full configuration is embedded in every output
artifact for provenance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .distill import AttackerConfig
from .source_model import SourceConfig, TrainHyper


class ConfigError(ValueError):
    """Bad config file, unknown key, or unparseable value."""


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "desk"
    # corpus
    lowercase: bool = False
    max_chars: int = 500
    synth_n: int = 2000
    synth_toxic_fraction: float = 0.5
    synth_extra_trigger: float = 0.0
    split_seed: int = 0
    # source model dimensions
    src_emb: int = 32
    src_hidden: int = 64
    src_layers: int = 2
    src_ff_hidden: int = 64
    # attacker dimensions (head widths are fixed by the architecture)
    atk_emb: int = 32
    atk_hidden: int = 64
    pretrained_emb: str = ""
    # training
    lr: float = 0.002
    batch_size: int = 32
    src_epochs: int = 3
    atk_epochs: int = 15
    clip_norm: float = 5.0
    strict_csv: bool = False
    # attacks
    beam_k: int = 5
    tau: float = 0.15
    max_flips: int = 15
    prune_width: int = 32
    plus_beam: int = 3
    exclude_oov: bool = True
    allow_reflip: bool = True
    # bench
    bench_max_flips: int = 40
    bench_attackers: str = "distflip,hotflip-plus,hotflip-10,hotflip-5,hotflip-1,random,attention"
    reference: str = "distflip"
    timing_repeats: int = 1
    # black-box endpoint
    endpoint: str = "http://127.0.0.1:8470"
    api_token: str = ""
    rate_limit_rps: float = 10.0
    retries: int = 3
    backoff: float = 0.25
    timeout: float = 10.0
    concurrency: int = 4

    def to_dict(self):
        return asdict(self)

    def source_config(self):
        return SourceConfig(self.src_emb, self.src_hidden, self.src_layers, self.src_ff_hidden)

    def attacker_config(self):
        return AttackerConfig(self.atk_emb, self.atk_hidden)

    def train_hyper(self, epochs):
        return TrainHyper(
            lr=self.lr, clip_norm=self.clip_norm, batch_size=self.batch_size, epochs=epochs
        )


PROFILES = {
    "desk": {},
    "paper": {
        "src_emb": 300,
        "src_hidden": 512,
        "atk_emb": 300,
        "atk_hidden": 512,
        "max_flips": 50,
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if raw and raw[0] in "\"'" and raw[-1] == raw[0] and len(raw) >= 2:
        raw = raw[1:-1]
    try:
        if kind in ("bool", bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {e}") from e


def parse_config_file(path):
    """Flat `key = value` lines; # comments and blank lines ignored."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            key, raw = line.split("=", 1)
            values[key.strip()] = raw
    return values


def build_config(config_path=None, overrides=(), seed=None):
    """Assemble a RunConfig: defaults, profile, file, then --set overrides."""
    file_values = parse_config_file(config_path) if config_path else {}
    override_values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        override_values[key.strip()] = raw

    profile = "desk"
    for source in (file_values, override_values):
        if "profile" in source:
            profile = str(source["profile"]).strip().strip("\"'")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")

    cfg = RunConfig(profile=profile)
    for key, value in PROFILES[profile].items():
        setattr(cfg, key, value)
    for source in (file_values, override_values):
        for key, raw in source.items():
            if key == "profile":
                continue
            setattr(cfg, key, _coerce(key, str(raw)))
    if seed is not None:
        cfg.seed = seed
    return cfg
