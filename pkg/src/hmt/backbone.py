"""Small causal decoder-only transformer operating at the embedding level.

The memory wrapper only talks to a backbone through ``embed``,
``forward_embeddings`` and ``logits`` (plus ``parameters`` / ``max_pos`` /
``d_model``), so any object with those members can be plugged in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nm
from .errors import CapacityError, ConfigError, DimensionError

BYTE_VOCAB = 256


@dataclass
class BackboneConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = BYTE_VOCAB
    max_pos: int = 64

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self


class Backbone:
    """Pre-LN transformer with learned absolute positions and GELU feedforward."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg.validate()
        d, v = cfg.d_model, cfg.vocab_size
        p = {}
        p["tok_emb"] = nm.normal_param(rng, (v, d))
        p["pos_emb"] = nm.normal_param(rng, (cfg.max_pos, d))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.g"] = nm.ones_param((d,))
            p[pre + "ln1.b"] = nm.zeros_param((d,))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + "attn." + w] = nm.normal_param(rng, (d, d))
            p[pre + "ln2.g"] = nm.ones_param((d,))
            p[pre + "ln2.b"] = nm.zeros_param((d,))
            p[pre + "ff.W1"] = nm.normal_param(rng, (d, cfg.d_ff))
            p[pre + "ff.b1"] = nm.zeros_param((cfg.d_ff,))
            p[pre + "ff.W2"] = nm.normal_param(rng, (cfg.d_ff, d))
            p[pre + "ff.b2"] = nm.zeros_param((d,))
        p["ln_f.g"] = nm.ones_param((d,))
        p["ln_f.b"] = nm.zeros_param((d,))
        p["head"] = nm.normal_param(rng, (d, v))
        for name, t in p.items():
            t.name = name
        self.params = p
        self._masks = {}

    @property
    def d_model(self):
        return self.cfg.d_model

    @property
    def max_pos(self):
        return self.cfg.max_pos

    def parameters(self):
        return dict(self.params)

    def embed(self, tokens):
        return nm.gather_rows(self.params["tok_emb"], np.asarray(tokens, dtype=np.int64))

    def _causal(self, n):
        m = self._masks.get(n)
        if m is None:
            m = np.tril(np.ones((n, n), dtype=bool))
            self._masks[n] = m
        return m

    def _attention(self, x, pre):
        p = self.params
        t_len, d = x.shape[-2:]
        h = self.cfg.n_heads
        dh = d // h

        def heads(w):
            y = x @ p[pre + w]
            return nm.swapaxes(y.reshape(y.shape[:-1] + (h, dh)), -2, -3)

        q, k, v = heads("attn.Wq"), heads("attn.Wk"), heads("attn.Wv")
        scores = (q @ nm.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        att = nm.softmax_rows(scores, mask=self._causal(t_len))
        out = nm.swapaxes(att @ v, -2, -3)
        return out.reshape(out.shape[:-2] + (d,)) @ p[pre + "attn.Wo"]

    def forward_embeddings(self, x):
        """Causal self-attention stack over ``x`` [..., T, d]; positions 0..T-1 are added here."""
        t_len = x.shape[-2]
        if t_len > self.cfg.max_pos:
            raise CapacityError(f"sequence length {t_len} exceeds max_pos {self.cfg.max_pos}")
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"expected width {self.cfg.d_model}, got {x.shape}")
        p = self.params
        h = x + p["pos_emb"][..., :t_len, :]
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            h = h + self._attention(nm.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"]), pre)
            z = nm.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            z = nm.gelu(z @ p[pre + "ff.W1"] + p[pre + "ff.b1"])
            h = h + (z @ p[pre + "ff.W2"] + p[pre + "ff.b2"])
        return h

    def logits(self, h):
        p = self.params
        return nm.layer_norm(h, p["ln_f.g"], p["ln_f.b"]) @ p["head"]
