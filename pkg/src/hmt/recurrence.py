"""Truncated BPTT over segments, the two-stage schedule, and checkpoints."""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"HMT1"
FORMAT_VERSION = 1
ARCH_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_pos")


@dataclass
class TrainConfig:
    stage: int = 1
    unroll: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 100
    steps: int = 200
    batch: int = 1
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.unroll < 1:
            raise ConfigError(f"unroll must be >= 1, got {self.unroll}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_decay_every < 1:
            raise ConfigError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        return self


def lr_at(step, cfg):
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


# ----------------------------------------------------------------------------
# unrolling


@dataclass
class Unroll:
    loss: nm.Tensor  # mean NLL over scored positions (per leading batch copy)
    nll_sum: nm.Tensor
    count: int
    state: object
    segments: int


def unroll(model, stream, T, start=0, state=None, target_mask=None, allow_short=False):
    """Run ``T`` segments from ``stream[start:]`` and score next-token predictions.

    Position ``i`` predicts ``stream[i + 1]``; targets may lie past the window
    but never past the stream. ``target_mask[p]`` (if given) selects which
    target tokens ``p`` are scored. The incoming state is detached, so
    nothing before ``start`` receives gradient.

    A 2-d ``stream`` [B, n] runs B independent streams in one pass; the
    loss then has shape [B].
    """
    stream = np.asarray(stream, dtype=np.int64)
    n_tok = stream.shape[-1]
    L = model.cfg.segment_len
    avail = n_tok - start
    have = max(0, -(-avail // L))
    if have < T and not allow_short:
        raise DataError(f"stream supplies {have} segment(s) from offset {start}; need {T}")
    state = model.initial_state() if state is None else state.detached()
    total = None
    count = 0
    segs = 0
    for s in range(start, min(start + T * L, n_tok), L):
        seg = stream[..., s:s + L]
        logits, state = model.step(state, seg)
        segs += 1
        tgt_pos = np.arange(s + 1, s + seg.shape[-1] + 1)
        keep = tgt_pos < n_tok
        if target_mask is not None:
            keep &= np.asarray(target_mask, dtype=bool)[np.minimum(tgt_pos, n_tok - 1)]
        rows = np.flatnonzero(keep)
        if rows.size == 0:
            continue
        part = nm.cross_entropy(logits[..., rows, :], stream[..., tgt_pos[rows]], reduction="sum")
        total = part if total is None else total + part
        count += rows.size
    if count == 0:
        raise DataError("no scored positions in the unroll window")
    return Unroll(loss=total * (1.0 / count), nll_sum=total, count=count, state=state, segments=segs)


def bptt_unroll(model, stream, T, start=0, state=None, target_mask=None):
    """Token-count-weighted mean cross-entropy over ``T`` consecutive segments."""
    return unroll(model, stream, T, start=start, state=state, target_mask=target_mask).loss


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainRecord:
    step: int
    loss: float
    ppl: float
    lr: float
    grad_norm: float

    def csv(self):
        return f"{self.step},{self.loss:.10g},{self.ppl:.10g},{self.lr:.10g},{self.grad_norm:.10g}"


def window_sampler(tokens, T, L):
    """Contiguous windows of T*L (+1 lookahead) tokens at uniform offsets."""
    tokens = np.asarray(tokens, dtype=np.int64)
    need = T * L + 1
    if len(tokens) < need:
        raise DataError(f"corpus has {len(tokens)} tokens; {T} segments of {L} need {need}")

    def sample(rng):
        off = int(rng.integers(0, len(tokens) - need + 1))
        return tokens[off:off + need], None

    return sample


class Trainer:
    """Owns parameters, Adam moments, the sampling RNG and the step counter."""

    def __init__(self, model, tcfg: TrainConfig, sampler, rng=None, optimizer=None, step=0):
        self.model = model
        self.tcfg = tcfg.validate()
        self.sampler = sampler
        self.params = model.parameters()
        self.rng = nm.make_rng(tcfg.seed + 1) if rng is None else rng
        self.opt = nm.Adam(self.params) if optimizer is None else optimizer
        self.step = step
        self.history = []

    def train_step(self):
        cfg = self.tcfg
        draws = [self.sampler(self.rng) for _ in range(cfg.batch)]
        if cfg.batch == 1:
            stream, mask = draws[0]
            loss = bptt_unroll(self.model, stream, cfg.unroll, target_mask=mask)
        else:
            # independent streams share one batched pass; masks must agree
            mask = draws[0][1]
            if any((m is None) != (mask is None) or (m is not None and not np.array_equal(m, mask))
                   for _, m in draws):
                raise DataError("batched streams need identical target masks")
            stream = np.stack([d[0] for d in draws])
            loss = bptt_unroll(self.model, stream, cfg.unroll, target_mask=mask).mean()
        nm.backward(loss)
        norm = nm.clip_grad_norm(self.params, cfg.clip_norm)
        lr = lr_at(self.step, cfg)
        self.opt.step(lr)
        value = loss.item()
        rec = TrainRecord(self.step, value, math.exp(min(value, 700.0)), lr, norm)
        self.history.append(rec)
        self.step += 1
        return rec

    def run(self, steps=None, log_file=None, callback=None):
        end = self.tcfg.steps if steps is None else self.step + steps
        while self.step < end:
            rec = self.train_step()
            if log_file is not None:
                log_file.write(rec.csv() + "\n")
                log_file.flush()
            if callback is not None:
                callback(rec)
        return self.history

    def checkpoint(self, config_text=""):
        return Checkpoint(
            config_text=config_text,
            params={k: p.data.copy() for k, p in self.params.items()},
            m1={k: v.copy() for k, v in self.opt.m1.items()},
            m2={k: v.copy() for k, v in self.opt.m2.items()},
            rng_words=nm.rng_state_words(self.rng),
            step=self.step,
        )

    @classmethod
    def resume(cls, model, tcfg, sampler, ckpt):
        load_params(model, ckpt)
        tr = cls(model, tcfg, sampler, rng=nm.rng_from_words(ckpt.rng_words), step=ckpt.step)
        for k in tr.params:
            tr.opt.m1[k] = ckpt.m1[k].copy()
            tr.opt.m2[k] = ckpt.m2[k].copy()
        tr.opt.t = ckpt.step
        return tr


def train_stage1(model, sampler, tcfg, log_file=None):
    """Stage 1: recall off, two-segment unroll."""
    if tcfg.stage != 1:
        raise ConfigError(f"train_stage1 needs stage=1, got {tcfg.stage}")
    if model.cfg.recall:
        model = model.with_config(recall=False)
    trainer = Trainer(model, tcfg, sampler)
    trainer.run(log_file=log_file)
    return trainer


def train_stage2(model, sampler, tcfg, init=None, log_file=None):
    """Stage 2: recall on, deep unroll; optionally warm-started from a stage-1 checkpoint.

    Parameters absent from ``init`` keep their fresh initialisation. The
    optimizer and the LR schedule start over.
    """
    if tcfg.stage != 2:
        raise ConfigError(f"train_stage2 needs stage=2, got {tcfg.stage}")
    if not model.cfg.recall:
        model = model.with_config(recall=True)
    if init is not None:
        check_compatible(init, model)
        load_params(model, init, strict=False)
    trainer = Trainer(model, tcfg, sampler)
    trainer.run(log_file=log_file)
    return trainer


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config_text: str
    params: dict
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)
    rng_words: tuple = (0, 0, 0, 0, 0, 0)
    step: int = 0
    version: int = FORMAT_VERSION

    def config(self):
        from .config import parse_text
        return parse_text(self.config_text, strict=False)


def load_params(model, ckpt, strict=True):
    params = model.parameters()
    missing = [k for k in params if k not in ckpt.params]
    if strict and missing:
        raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for k, p in params.items():
        if k in ckpt.params:
            arr = ckpt.params[k]
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data[...] = arr
    # prompt params outside the current parameter set (e.g. recall weights while recall is off)
    extra = model.prompts.named(True)
    for k, p in extra.items():
        if k not in params and k in ckpt.params:
            p.data[...] = ckpt.params[k]


def check_compatible(ckpt, model):
    have = ckpt.config()
    cfg = model.backbone.cfg
    bad = []
    for key in ARCH_KEYS:
        if key in have and int(have[key]) != getattr(cfg, key):
            bad.append(f"{key} (checkpoint {have[key]}, run {getattr(cfg, key)})")
    if bad:
        raise ConfigError("incompatible checkpoint: " + "; ".join(bad))


def _tensor_record(buf, name, arr):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dump_checkpoint(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    text = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    tensors = list(ckpt.params.items())
    for k in ckpt.params:
        if k in ckpt.m1:
            tensors.append((k + ".m1", ckpt.m1[k]))
            tensors.append((k + ".m2", ckpt.m2[k]))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _tensor_record(buf, name, np.asarray(arr))
    buf.write(struct.pack("<7Q", *ckpt.rng_words, ckpt.step))
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an HMT checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        text = r.take(n, "config text").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config text is not UTF-8", at) from None
    (count,) = r.unpack("<I", "tensor count")
    params, m1, m2 = {}, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * size, f"payload of {name}"), dtype="<f8").astype(np.float64)
        arr = arr.reshape(dims)
        if name.endswith(".m1"):
            m1[name[:-3]] = arr
        elif name.endswith(".m2"):
            m2[name[:-3]] = arr
        else:
            params[name] = arr
    words = r.unpack("<7Q", "rng/step trailer")
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return Checkpoint(config_text=text, params=params, m1=m1, m2=m2,
                      rng_words=tuple(words[:6]), step=words[6], version=version)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
