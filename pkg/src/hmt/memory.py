"""Hierarchical memory around a backbone: sensory, short-term and long-term memory.

One step over a segment of token ids:

1. embed the segment and summarise its first ``repr_len`` embeddings,
   bracketed by the learned summarisation prompt, into one embedding;
2. use that summary as a query over the cached memory embeddings
   (projection-only cross attention, no value/output maps);
3. wrap the segment as ``recall ∘ sensory ∘ segment ∘ recall`` where sensory
   is the tail of the previous segment's token embeddings;
4. run the backbone; rows aligned with the segment feed the logits and the
   last row becomes the segment's memory embedding, pushed into the cache.

With recall disabled steps 1-2 are skipped and the previous memory embedding
is used directly as the recall prompt.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, ContractError, DimensionError

INIT_INDEX = -1  # segment index of the m_init pseudo-entry


@dataclass
class HmtConfig:
    segment_len: int = 256
    sensory_len: int = 32
    repr_len: int | None = None  # None -> segment_len // 2
    cache_size: int = 300
    dh: int | None = None  # None -> d_model
    recall: bool = True
    unroll: int = 2

    def __post_init__(self):
        if self.repr_len is None:
            self.repr_len = max(1, self.segment_len // 2)

    def validate(self, d_model=None):
        if self.segment_len < 1:
            raise ConfigError(f"segment_len must be >= 1, got {self.segment_len}")
        if not 0 <= self.sensory_len < self.segment_len:
            raise ConfigError(f"sensory_len must satisfy 0 <= k < L, got k={self.sensory_len}, L={self.segment_len}")
        if not 1 <= self.repr_len <= self.segment_len:
            raise ConfigError(f"repr_len must satisfy 1 <= j <= L, got j={self.repr_len}, L={self.segment_len}")
        if self.recall and self.cache_size < 1:
            raise ConfigError(f"cache_size must be >= 1 in recall mode, got {self.cache_size}")
        if self.dh is not None and self.dh < 1:
            raise ConfigError(f"dh must be >= 1, got {self.dh}")
        if self.unroll < 1:
            raise ConfigError(f"unroll must be >= 1, got {self.unroll}")
        return self

    def head_dim(self, d_model):
        return self.dh if self.dh is not None else d_model


@dataclass
class PromptParams:
    H_T: nm.Tensor
    W_q: nm.Tensor
    W_k: nm.Tensor
    m_init: nm.Tensor

    @classmethod
    def init(cls, rng, d_model, dh):
        return cls(
            m_init=nm.normal_param(rng, (1, d_model), "prompt.m_init"),
            H_T=nm.normal_param(rng, (1, d_model), "prompt.H_T"),
            W_q=nm.normal_param(rng, (d_model, dh), "prompt.W_q"),
            W_k=nm.normal_param(rng, (d_model, dh), "prompt.W_k"),
        )

    def named(self, recall=True):
        out = {"prompt.m_init": self.m_init}
        if recall:
            out.update({"prompt.H_T": self.H_T, "prompt.W_q": self.W_q, "prompt.W_k": self.W_k})
        return out


class MemoryCache:
    """FIFO ring of at most ``capacity`` (segment_index, embedding) pairs, oldest first."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ConfigError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries = deque()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def push(self, index, emb):
        if self.entries and index <= self.entries[-1][0]:
            raise ContractError(f"cache index {index} not after {self.entries[-1][0]}")
        self.entries.append((index, emb))
        if len(self.entries) > self.capacity:
            self.entries.popleft()

    def indices(self):
        return [i for i, _ in self.entries]

    def stacked(self):
        return nm.concat([e for _, e in self.entries])

    def copy(self, capacity=None, detach=False):
        out = MemoryCache(self.capacity if capacity is None else capacity)
        for i, e in self.entries:
            out.push(i, e.detach() if detach else e)
        return out


def update_cache(cache, segment_index, h_mem):
    nm._check_finite(h_mem.data, "update_cache")
    cache.push(segment_index, h_mem)
    return cache


@dataclass
class RecallEvent:
    segment: int
    indices: list
    scores: np.ndarray  # pre-softmax, already divided by sqrt(dh)


@dataclass
class HmtState:
    cache: MemoryCache | None
    sensory: nm.Tensor | None
    last_mem: nm.Tensor
    n: int = 0
    recall_log: list | None = None

    def detached(self):
        """Copy whose history is constant: the truncation point of a BPTT window."""
        return HmtState(
            cache=None if self.cache is None else self.cache.copy(detach=True),
            sensory=None if self.sensory is None else self.sensory.detach(),
            last_mem=self.last_mem.detach(),
            n=self.n,
            recall_log=self.recall_log,
        )


@dataclass
class RecallScratch:
    Q: nm.Tensor
    K: nm.Tensor | None
    A: nm.Tensor | None
    prefix_size: int
    A_n: nm.Tensor | None = None


# ----------------------------------------------------------------------------
# the four steps


def extract_representation(h_n, cfg, prompts, backbone):
    """Summary embedding: last backbone output over ``H_T ∘ h_n[:j] ∘ H_T``."""
    if h_n.shape[-2] < 1:
        raise ContractError("extract_representation needs at least one embedding")
    jp = min(cfg.repr_len, h_n.shape[-2])
    x = nm.concat([prompts.H_T, h_n[..., :jp, :], prompts.H_T])
    return backbone.forward_embeddings(x)[..., -1:, :]


def _scores(h_sum, mem, prompts):
    dh = prompts.W_q.shape[1]
    q = h_sum @ prompts.W_q
    k = mem @ prompts.W_k
    return (q @ nm.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))


def recall(h_sum, cache, prompts):
    """Returns (H^S, scaled score row)."""
    if cache is None or len(cache) == 0:
        raise ContractError("memory_search on an empty cache; seed it with m_init")
    mem = cache.stacked()
    scores = _scores(h_sum, mem, prompts)
    return nm.softmax_rows(scores) @ mem, scores


def memory_search(h_sum, cache, prompts):
    return recall(h_sum, cache, prompts)[0]


def prepare_recall(h_sum, prefix_cache, prompts):
    """The part of the search that does not need the newest memory embedding."""
    q = h_sum @ prompts.W_q
    if prefix_cache is None or len(prefix_cache) == 0:
        return RecallScratch(Q=q, K=None, A=None, prefix_size=0)
    k = prefix_cache.stacked() @ prompts.W_k
    return RecallScratch(Q=q, K=k, A=q @ nm.swapaxes(k, -1, -2), prefix_size=len(prefix_cache))


def memory_search_incremental(scratch, prefix_cache, new_mem, prompts):
    """Finish a search prepared by ``prepare_recall`` once ``new_mem`` exists."""
    size = 0 if prefix_cache is None else len(prefix_cache)
    if scratch.prefix_size != size:
        raise ContractError(f"stale recall scratch: prepared over {scratch.prefix_size} entries, cache has {size}")
    dh = prompts.W_q.shape[1]
    k_n = new_mem @ prompts.W_k
    scratch.A_n = scratch.Q @ nm.swapaxes(k_n, -1, -2)
    if scratch.A is None:
        row, mem = scratch.A_n, new_mem
    else:
        row = nm.concat([scratch.A, scratch.A_n], axis=-1)
        mem = nm.concat([prefix_cache.stacked(), new_mem])
    return nm.softmax_rows(row * (1.0 / math.sqrt(dh))) @ mem


def augment_segment(h_s, sensory, h_n):
    parts = [h_s]
    if sensory is not None and sensory.shape[-2]:
        parts.append(sensory)
    parts += [h_n, h_s]
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"augment_segment width mismatch: {[p.shape for p in parts]}")
    return nm.concat(parts)


def process_segment(augmented, seg_len, backbone):
    """Returns (H_out rows aligned with the segment, H_mem)."""
    out = backbone.forward_embeddings(augmented)
    lead = augmented.shape[-2] - seg_len - 1
    return out[..., lead:lead + seg_len, :], out[..., -1:, :]


# ----------------------------------------------------------------------------
# steps


def initial_state(cfg, prompts, record=False):
    cache = None
    if cfg.recall:
        cache = MemoryCache(cfg.cache_size)
        cache.push(INIT_INDEX, prompts.m_init)
    return HmtState(cache=cache, sensory=None, last_mem=prompts.m_init, n=0,
                    recall_log=[] if record else None)


def _finish_step(state, cfg, h_s, h_n, backbone):
    seg_len = h_n.shape[-2]
    aug = augment_segment(h_s, state.sensory, h_n)
    h_out, h_mem = process_segment(aug, seg_len, backbone)
    logits = backbone.logits(h_out)
    cache = state.cache
    if cache is not None:
        update_cache(cache, state.n, h_mem)
    k = min(cfg.sensory_len, seg_len)
    sensory = h_n[..., seg_len - k:, :] if k else None
    new = HmtState(cache=cache, sensory=sensory, last_mem=h_mem, n=state.n + 1,
                   recall_log=state.recall_log)
    return logits, new


def _check_segment(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 0 or tokens.shape[-1] < 1:
        raise ContractError("segment must hold at least one token")
    return tokens


def hmt_step(state, segment_tokens, cfg, prompts, backbone):
    tokens = _check_segment(segment_tokens)
    h_n = backbone.embed(tokens)
    h_sum = extract_representation(h_n, cfg, prompts, backbone)
    h_s, scores = recall(h_sum, state.cache, prompts)
    if state.recall_log is not None:
        state.recall_log.append(RecallEvent(state.n, state.cache.indices(), scores.data[..., 0, :].copy()))
    return _finish_step(state, cfg, h_s, h_n, backbone)


def no_recall_step(state, segment_tokens, cfg, prompts, backbone):
    tokens = _check_segment(segment_tokens)
    h_n = backbone.embed(tokens)
    return _finish_step(state, cfg, state.last_mem, h_n, backbone)


# ----------------------------------------------------------------------------
# model


class HmtModel:
    """Backbone + memory prompts + mechanism config."""

    def __init__(self, backbone, cfg: HmtConfig, prompts: PromptParams):
        self.backbone = backbone
        self.cfg = cfg.validate()
        self.prompts = prompts
        need = max(cfg.segment_len + cfg.sensory_len + 2, cfg.repr_len + 2)
        if backbone.max_pos < need:
            raise ConfigError(f"max_pos={backbone.max_pos} too small; need >= {need} for L, k, j")

    @classmethod
    def build(cls, bcfg: BackboneConfig, hcfg: HmtConfig, seed=0):
        """Backbone weights come from ``seed``, prompt weights from ``seed + 2``."""
        backbone = Backbone(bcfg, nm.make_rng(seed))
        prompts = PromptParams.init(nm.make_rng(seed + 2), bcfg.d_model, hcfg.head_dim(bcfg.d_model))
        return cls(backbone, hcfg, prompts)

    def with_config(self, **changes):
        """Same weights, different mechanism settings (evaluation-time ablations)."""
        return HmtModel(self.backbone, replace(self.cfg, **changes), self.prompts)

    def parameters(self):
        out = dict(self.backbone.parameters())
        out.update(self.prompts.named(self.cfg.recall))
        return out

    def initial_state(self, record=False):
        return initial_state(self.cfg, self.prompts, record=record)

    def step(self, state, segment_tokens):
        fn = hmt_step if self.cfg.recall else no_recall_step
        return fn(state, segment_tokens, self.cfg, self.prompts, self.backbone)

    def run(self, tokens, state=None, record=False):
        """Segment ``tokens`` and step through them; returns (list of logits, final state)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        state = self.initial_state(record=record) if state is None else state
        out = []
        L = self.cfg.segment_len
        for s in range(0, len(tokens), L):
            logits, state = self.step(state, tokens[s:s + L])
            out.append(logits)
        return out, state
