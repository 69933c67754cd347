"""Run configuration: one flat ``key = value`` file plus ``--key value`` overrides."""

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .data import FrequencyBins
from .errors import ConfigError
from .mhq import MhqConfig
from .recmodel import RecConfig


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    embeddings: str = "data/items.aemb"
    interactions: str = "data/interactions.tsv"

    # synthetic data
    n_items: int = 1000
    dim: int = 64
    n_users: int = 2000
    clusters: int = 20
    seq_min: int = 5
    seq_max: int = 10
    stay_prob: float = 0.8
    noise: float = 0.35

    # tokenizer
    D: int = 512
    M: int = 32
    L: int = 2
    K: int = 256
    lambda_bal: float = 0.01
    lambda_reg: float = 0.01
    gamma: float = 0.99
    mhq_lr: float = 0.001
    mhq_epochs: int = 50
    mhq_batch: int = 256
    dead_fraction: float = 0.01

    # recommender
    d_m: int = 448
    n_layers: int = 2
    heads: int = 8
    max_len: int = 50
    dropout: float = 0.1
    lr: float = 0.003
    momentum: float = 0.9
    optimizer: str = "adam"
    batch: int = 256
    max_epochs: int = 100
    patience: int = 20
    experts: int = 3
    expert_hidden: int = 0
    ffn_mult: int = 4
    head_hidden: int = 0
    per_position: bool = True
    variant: str = "full"

    # evaluation
    split: str = "test"
    bins: str = "6,15,50"
    negatives: int = 99
    k0: int = 50
    topk: int = 100
    binned: bool = False
    spectrum: bool = False
    ablation: bool = False
    fuse_with: str = ""
    predictions: str = ""
    predictions_b: str = ""

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise ConfigError(f"split must be train, valid or test, not {self.split!r}")
        if self.negatives < 1 or self.topk < 1 or self.k0 < 0:
            raise ConfigError("negatives and topk must be positive, k0 nonnegative")
        self.bin_boundaries()

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def bin_boundaries(self) -> FrequencyBins:
        try:
            values = tuple(int(v) for v in self.bins.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"bins must be comma-separated integers, got {self.bins!r}") from None
        if not values or list(values) != sorted(set(values)):
            raise ConfigError("bin boundaries must be strictly increasing")
        return FrequencyBins(values)

    def mhq_config(self) -> MhqConfig:
        return MhqConfig(
            D=self.D,
            M=self.M,
            L=self.L,
            K=self.K,
            lambda_bal=self.lambda_bal,
            lambda_reg=self.lambda_reg,
            gamma=self.gamma,
            lr=self.mhq_lr,
            epochs=self.mhq_epochs,
            batch=self.mhq_batch,
            seed=self.seed,
            dead_fraction=self.dead_fraction,
        )

    def rec_config(self, variant: str | None = None) -> RecConfig:
        names = {f.name for f in dataclasses.fields(RecConfig)}
        kwargs = {k: getattr(self, k) for k in names if k not in ("variant",)}
        return RecConfig(**kwargs, variant=variant or self.variant)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key: str, raw: str):
    kind = _HINTS[key]
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def normalize_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = normalize_key(key)
        values[key] = _coerce(key, value)
    return values


def parse_overrides(tokens: list) -> dict:
    """``["--key", "value", ...]`` into typed values; a bare boolean flag means true."""
    values = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if nxt is None or nxt.startswith("--"):
                if _HINTS.get(key.replace("-", "_")) is not bool:
                    raise ConfigError(f"--{key} needs a value")
                value = "true"
                i += 1
            else:
                value = nxt
                i += 2
        key = normalize_key(key)
        values[key] = _coerce(key, value)
    return values


def load_run_config(path=None, overrides: list | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    values.update(parse_overrides(overrides or []))
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}\n")
    return "".join(lines)
