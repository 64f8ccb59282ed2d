"""Run configuration: flat ``section.key=value`` text with named dataset profiles."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .net import ModelConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ScheduleConfig:
    S: int = 1000
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    beta0: float = -1.0  # negative means "use the first schedule beta"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_epochs: int = 10
    alphas: tuple = (0.2, 0.3, 0.4, 0.5)
    smooth_weight: float = 0.15
    smooth_tau: float = 4.0
    grad_clip: float = 1.0
    sampler: str = "importance"
    history: int = 10
    seed: int = 0


@dataclass
class InferConfig:
    mode: str = "deterministic"
    num_steps: int = 100
    samples: int = 1
    seed: int = 0
    noise: str = "shared"  # stochastic re-noising: one draw per sample (shared) or per step (fresh)


@dataclass
class DataConfig:
    profile: str = "breakfast"
    root: str = "data"
    stride: int = 3
    eval_alpha: float = 0.3
    eval_beta: float = 0.5
    # synthetic generator knobs
    ambiguity: float = 0.0
    grammar_seed: int = 0
    n_train: int = 300
    n_test: int = 100
    data_seed: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def flat(self) -> dict:
        out = {}
        for section in dataclasses.fields(self):
            sub = getattr(self, section.name)
            for f in dataclasses.fields(sub):
                out[f"{section.name}.{f.name}"] = _render(getattr(sub, f.name))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.flat().items())

    def echo(self) -> str:
        """One-line config summary embedded in artifact headers."""
        return ";".join(f"{k}={v}" for k, v in self.flat().items())

    def validate(self):
        m, s, t, i, d = self.model, self.schedule, self.train, self.infer, self.data
        checks = [
            ("model.hidden_dim", m.hidden_dim > 0 and m.hidden_dim % m.heads == 0,
             "must be positive and divisible by model.heads"),
            ("model.decoder_dim", m.decoder_dim > 0 and m.decoder_dim % m.heads == 0,
             "must be positive and divisible by model.heads"),
            ("model.num_queries", m.num_queries >= 1, "must be >= 1"),
            ("model.num_classes", m.num_classes >= 2, "must be >= 2 (actions plus EOS)"),
            ("model.mask_kind", m.mask_kind in ("global", "local"), "must be global or local"),
            ("model.dropout", 0 <= m.dropout < 1, "must lie in [0, 1)"),
            ("model.max_steps", m.max_steps == s.S, "must equal schedule.S"),
            ("schedule.S", s.S >= 1, "must be >= 1"),
            ("schedule.kind", s.kind in ("linear", "sqrt"), "must be linear or sqrt"),
            ("schedule.beta_min", 0 < s.beta_min <= s.beta_max < 1, "need 0 < beta_min <= beta_max < 1"),
            ("train.lr", t.lr >= 0, "must be >= 0"),
            ("train.batch_size", t.batch_size >= 1, "must be >= 1"),
            ("train.alphas", all(0 < a < 1 for a in t.alphas) and len(t.alphas) > 0,
             "must be a non-empty list in (0, 1)"),
            ("train.grad_clip", t.grad_clip > 0, "must be > 0"),
            ("train.sampler", t.sampler in ("uniform", "importance"), "must be uniform or importance"),
            ("infer.mode", i.mode in ("deterministic", "stochastic"), "must be deterministic or stochastic"),
            ("infer.num_steps", 1 <= i.num_steps <= s.S, "must lie in [1, schedule.S]"),
            ("infer.samples", i.samples >= 1, "must be >= 1"),
            ("infer.noise", i.noise in ("shared", "fresh"), "must be shared or fresh"),
            ("data.stride", d.stride >= 1, "must be >= 1"),
            ("data.eval_alpha", 0 < d.eval_alpha < 1 and 0 < d.eval_beta < 1
             and d.eval_alpha + d.eval_beta <= 1, "alpha, beta in (0, 1) with alpha + beta <= 1"),
            ("data.ambiguity", 0 <= d.ambiguity <= 1, "must lie in [0, 1]"),
        ]
        if m.mask_kind == "local":
            w = list(m.windows)
            checks.append(("model.windows", bool(w) and all(x % 2 == 1 for x in w)
                           and w == sorted(w), "must be odd and nondecreasing"))
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        return self


def _render(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(key, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [x for x in raw.split(",") if x.strip()]
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in items)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def set_value(cfg: RunConfig, key: str, raw: str):
    section, _, name = key.partition(".")
    sub = getattr(cfg, section, None) if section in {f.name for f in dataclasses.fields(cfg)} else None
    if sub is None or not name or name not in {f.name for f in dataclasses.fields(sub)}:
        raise ConfigError(key, "unknown configuration key")
    setattr(sub, name, _parse(key, raw, getattr(sub, name)))


def apply_lines(cfg: RunConfig, lines, origin="<config>"):
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}", f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        set_value(cfg, key.strip(), value)
    return cfg


PROFILES: dict[str, list[str]] = {
    "breakfast": [
        "model.num_classes=49", "model.hidden_dim=256", "model.decoder_dim=1024",
        "model.decoder_layers=4", "model.num_queries=8", "train.batch_size=64", "train.lr=5e-4",
        "train.epochs=50", "data.stride=3",
    ],
    "salads50": [
        "model.num_classes=18", "model.hidden_dim=256", "model.decoder_dim=256",
        "model.decoder_layers=8", "model.num_queries=16", "train.batch_size=8", "train.lr=1e-3",
        "train.epochs=30", "data.stride=3",
    ],
    "epic": [
        "model.multilabel=true", "model.decoder_dim=1024", "model.num_queries=1",
        "train.batch_size=32", "train.lr=2.5e-4", "train.epochs=50", "data.stride=1",
        "train.alphas=0.2,0.3,0.4,0.5,0.6,0.7,0.8",
    ],
    "egtea": [
        "model.multilabel=true", "model.decoder_dim=512", "model.num_queries=1",
        "train.batch_size=32", "train.lr=5e-4", "train.epochs=100", "data.stride=1",
        "train.alphas=0.2,0.3,0.4,0.5,0.6,0.7,0.8",
    ],
    # desk-scale testbed: small enough to train on one CPU core in minutes
    "synthetic": [
        "model.input_dim=32", "model.num_classes=13", "model.hidden_dim=64", "model.decoder_dim=64",
        "model.encoder_layers=2", "model.decoder_layers=2", "model.heads=4", "model.ffn_mult=2",
        "model.num_queries=8", "train.batch_size=16", "train.lr=1e-3", "train.epochs=150",
        "train.warmup_epochs=2", "infer.num_steps=20", "data.stride=2", "data.ambiguity=0.0",
    ],
    "synthetic-ambiguous": [
        "model.input_dim=32", "model.num_classes=13", "model.hidden_dim=64", "model.decoder_dim=64",
        "model.encoder_layers=2", "model.decoder_layers=2", "model.heads=4", "model.ffn_mult=2",
        "model.num_queries=8", "train.batch_size=16", "train.lr=1e-3", "train.epochs=150",
        "train.warmup_epochs=2", "infer.num_steps=20", "data.stride=2", "data.ambiguity=0.5",
        "data.n_test=400",
    ],
}


def make_config(profile: str = "breakfast", overrides=(), path=None) -> RunConfig:
    """Profile defaults, then the config file, then ``key=value`` overrides."""
    if profile not in PROFILES:
        raise ConfigError("data.profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig()
    apply_lines(cfg, PROFILES[profile], f"profile:{profile}")
    cfg.data.profile = profile
    if path is not None:
        apply_lines(cfg, Path(path).read_text().splitlines(), str(path))
    apply_lines(cfg, overrides, "--set")
    return cfg.validate()


def load_config(path, overrides=()) -> RunConfig:
    """Load a config file whose ``data.profile`` line selects the base profile."""
    profile = "breakfast"
    for line in Path(path).read_text().splitlines():
        key, _, value = line.split("#", 1)[0].partition("=")
        if key.strip() == "data.profile":
            profile = value.strip()
    for o in overrides:
        key, _, value = o.partition("=")
        if key.strip() == "data.profile":
            profile = value.strip()
    return make_config(profile, overrides, path)
