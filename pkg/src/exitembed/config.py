"""Run configuration: one flat set of tunables, a key=value file format, and
per-stage seed derivation from a single root seed."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .numerics import derive_seed


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # corpus
    seed: int = 0
    n_items: int = 200
    noise_low: float = 0.0
    noise_high: float = 1.0
    nuisance_scale: float = 8.0
    noise_floor: float = 0.1
    # encoder
    encoder_seed: int = 42
    num_layers: int = 12
    d_model: int = 64
    unified_dim: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    residual_gain: float = 0.6
    denoise_rate: float = 0.2
    # predictor
    n_superficial: int = 3
    predictor_hidden: int = 32
    predictor_epochs: int = 400
    predictor_lr: float = 0.5
    # healing
    heal_epochs: int = 50
    heal_lr: float = 1e-2
    heal_min_pool: int = 8
    # offline embedding
    max_batch: int = 16
    pipeline: bool = True
    inject_load_ms: float = -1.0
    inject_compute_ms: float = -1.0
    quantize_superficial: bool = False
    cache_encoding: str = "int4"
    embedding_encoding: str = "f32"
    store_modality: str = "A"
    # query
    query_modality: str = "B"
    k1: int = 10
    k2: int = 10
    n_queries: int = 0
    timings: bool = False
    # simulator
    sim_items: int = 1000
    sim_rate: float = 4.0
    sim_superficial: int = 2
    sim_max_batch: int = 16
    sim_horizon: float = -1.0
    # paths
    workdir: str = "run"

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n_items >= 1, "n_items must be >= 1")
        need(0.0 <= self.noise_low <= self.noise_high <= 1.0, "need 0 <= noise_low <= noise_high <= 1")
        need(self.nuisance_scale >= 0 and self.noise_floor >= 0, "noise scales must be >= 0")
        need(2 <= self.num_layers <= 255, "num_layers must lie in [2, 255]")
        need(1 <= self.unified_dim <= self.d_model, "need 1 <= unified_dim <= d_model")
        need(self.lora_rank >= 0, "lora_rank must be >= 0")
        need(0.0 <= self.denoise_rate <= 1.0, "denoise_rate must lie in [0, 1]")
        need(1 <= self.n_superficial < self.num_layers, f"n_superficial must lie in [1, {self.num_layers - 1}]")
        need(self.predictor_hidden >= 1 and self.predictor_epochs >= 0 and self.predictor_lr > 0,
             "predictor needs hidden >= 1, epochs >= 0, lr > 0")
        need(self.heal_epochs >= 0 and self.heal_lr > 0 and self.heal_min_pool >= 1,
             "healing needs epochs >= 0, lr > 0, min_pool >= 1")
        need(self.max_batch >= 1, "max_batch must be >= 1")
        need(self.cache_encoding in ("int4", "f32"), "cache_encoding must be int4 or f32")
        need(self.embedding_encoding in ("int4", "f32"), "embedding_encoding must be int4 or f32")
        need(self.store_modality in ("A", "B") and self.query_modality in ("A", "B"),
             "modalities are A and B")
        need(self.k1 >= 1 and self.k2 >= 1, "k1 and k2 must be >= 1")
        need(self.n_queries >= 0, "n_queries must be >= 0 (0 means every item)")
        need(self.sim_items >= 0 and self.sim_rate > 0 and self.sim_max_batch >= 1,
             "simulator needs items >= 0, rate > 0, max_batch >= 1")
        need(0 <= self.sim_superficial < self.num_layers, "sim_superficial must lie in [0, num_layers)")
        need(bool(self.workdir), "workdir must not be empty")
        return self

    # -- derived -------------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def encoder_config(self):
        from .encoder import EncoderConfig

        return EncoderConfig(
            num_layers=self.num_layers, d_model=self.d_model, unified_dim=self.unified_dim,
            seed=self.encoder_seed, lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
            residual_gain=self.residual_gain, denoise_rate=self.denoise_rate,
        )

    def inject_load_s(self):
        return None if self.inject_load_ms < 0 else self.inject_load_ms / 1000.0

    def inject_compute_s(self):
        return None if self.inject_compute_ms < 0 else self.inject_compute_ms / 1000.0

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    def echo(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def as_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value: str):
    """Parse a textual value for ``key`` to the field's type."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = str(value).strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (already-typed or text)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, val in (overrides or {}).items():
        values[key] = coerce(key, val) if isinstance(val, str) else val
    unknown = set(values) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())
