import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hmt import numerics as nm
from hmt.backbone import BackboneConfig
from hmt.memory import HmtConfig, HmtModel, PromptParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_model(recall=True, L=8, k=2, j=None, N=4, d=16, heads=2, layers=1, seed=0, vocab=256, d_ff=32):
    j = L // 2 if j is None else j
    b = BackboneConfig(d_model=d, n_layers=layers, n_heads=heads, d_ff=d_ff, vocab_size=vocab,
                       max_pos=max(L + k + 2, j + 2))
    h = HmtConfig(segment_len=L, sensory_len=k, repr_len=j, cache_size=N, recall=recall, unroll=2)
    return HmtModel.build(b, h, seed=seed)


class StubConfig:
    def __init__(self, d_model, vocab_size, max_pos):
        self.d_model, self.vocab_size, self.max_pos = d_model, vocab_size, max_pos


class PositionwiseStub:
    """Backbone without attention or positions: every output row depends on its input row only."""

    def __init__(self, d=8, vocab=32, max_pos=64, seed=0):
        rng = nm.make_rng(seed)
        self.cfg = StubConfig(d, vocab, max_pos)
        self.params = {
            "tok_emb": nm.normal_param(rng, (vocab, d), "tok_emb", std=0.5),
            "W": nm.normal_param(rng, (d, d), "W", std=0.5),
            "head": nm.normal_param(rng, (d, vocab), "head", std=0.5),
        }

    d_model = property(lambda self: self.cfg.d_model)
    max_pos = property(lambda self: self.cfg.max_pos)

    def parameters(self):
        return dict(self.params)

    def embed(self, tokens):
        return nm.gather_rows(self.params["tok_emb"], np.asarray(tokens, dtype=np.int64))

    def forward_embeddings(self, x):
        return nm.ttanh(x @ self.params["W"])

    def logits(self, h):
        return h @ self.params["head"]


class IdentityStub(PositionwiseStub):
    """Backbone whose forward pass returns its input unchanged."""

    def forward_embeddings(self, x):
        return x


def stub_model(stub, L=8, k=0, recall=False, N=4, seed=0):
    h = HmtConfig(segment_len=L, sensory_len=k, repr_len=max(1, L // 2), cache_size=N, recall=recall)
    prompts = PromptParams.init(nm.make_rng(seed + 2), stub.d_model, stub.d_model)
    return HmtModel(stub, h, prompts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []  # (criterion, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
