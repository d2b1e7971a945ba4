"""Flat ``key = value`` run configuration shared by the CLI and checkpoints."""
from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .memory import HmtConfig
from .recurrence import TrainConfig

# derived seeds: backbone init = seed, window sampling = seed + 1,
# prompt init = seed + 2, evaluation streams = seed + 3
SEED_OFFSETS = {"init": 0, "sample": 1, "prompts": 2, "eval": 3}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 256
    max_pos: int | None = None
    segment_len: int = 256
    sensory_len: int = 32
    repr_len: int | None = None
    cache_size: int = 300
    dh: int | None = None
    recall: bool = True
    unroll: int = 2
    stage: int = 1
    lr: float = 1e-5
    lr_decay: float = 0.7
    lr_decay_every: int = 100
    clip_norm: float = 1.0
    steps: int = 200
    batch: int = 1
    seed: int = 0
    train_path: str | None = None
    eval_path: str | None = None
    out_dir: str = "runs"

    def resolve(self):
        """Fill derived defaults so the config is complete before any run starts."""
        if self.repr_len is None:
            self.repr_len = max(1, self.segment_len // 2)
        if self.dh is None:
            self.dh = self.d_model
        if self.max_pos is None:
            self.max_pos = max(self.segment_len + self.sensory_len + 2, self.repr_len + 2)
        self.backbone().validate()
        self.hmt().validate()
        self.train().validate()
        return self

    def backbone(self):
        return BackboneConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                              d_ff=self.d_ff, vocab_size=self.vocab_size,
                              max_pos=self.max_pos if self.max_pos is not None else 1)

    def hmt(self):
        return HmtConfig(segment_len=self.segment_len, sensory_len=self.sensory_len, repr_len=self.repr_len,
                         cache_size=self.cache_size, dh=self.dh, recall=self.recall, unroll=self.unroll)

    def train(self):
        return TrainConfig(stage=self.stage, unroll=self.unroll, lr=self.lr, lr_decay=self.lr_decay,
                           lr_decay_every=self.lr_decay_every, steps=self.steps, batch=self.batch,
                           clip_norm=self.clip_norm, seed=self.seed)

    def sub_seed(self, role):
        return self.seed + SEED_OFFSETS[role]

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def content_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}
KEYS = tuple(_FIELDS)


def _convert(key, raw, where):
    kind = str(_FIELDS[key].type)
    raw = raw.strip()
    try:
        if kind.startswith("bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r} for key {key!r}") from None


def parse_text(text, source="<config>", strict=True, warn=None):
    """Parse ``key = value`` lines into a dict of converted values.

    With ``strict=False`` unknown keys are kept as raw strings instead of
    raising (used when reading configs embedded in checkpoints).
    """
    warn = warn or (lambda msg: print(msg, file=sys.stderr))
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, raw = (x.strip() for x in body.split("=", 1))
        if key not in _FIELDS:
            if strict:
                raise ConfigError(f"{where}: unknown key {key!r}")
            out[key] = raw
            continue
        if key in out:
            warn(f"warning: {where}: duplicate key {key!r}, last value wins")
        out[key] = _convert(key, raw, where) if strict else raw
    return out


def parse_config(path=None, overrides=None, warn=None):
    """Config file (optional) plus ``{key: raw string}`` overrides -> resolved RunConfig."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_text(p.read_text(encoding="utf-8"), source=str(path), warn=warn)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"command line: unknown key {key!r}")
        values[key] = _convert(key, str(raw), "command line")
    return RunConfig(**values).resolve()


def require(cfg, *keys):
    for key in keys:
        if getattr(cfg, key) in (None, ""):
            raise ConfigError(f"missing required key {key!r}")
