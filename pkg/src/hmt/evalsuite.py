"""Perplexity, recall diagnostics, ablations, sweeps and the gradient/runtime reports."""
from __future__ import annotations

import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DataError, StabilityError
from .memory import (INIT_INDEX, HmtModel, MemoryCache, augment_segment, extract_representation,
                     memory_search_incremental, prepare_recall, process_segment)
from .recurrence import unroll

INIT_BIN = "init"  # histogram bin of the m_init pseudo-entry
RUNTIME_PHASES = ("forward", "representation", "prefix_scores", "last_entry_score")


# ----------------------------------------------------------------------------
# report container and CSV output


@dataclass
class EvalReport:
    ppl_table: list = field(default_factory=list)  # (length, ppl)
    sweep_rows: list = field(default_factory=list)  # (param, value, ppl, seed)
    histogram: dict = field(default_factory=dict)  # distance or INIT_BIN -> count
    grad_table: list = field(default_factory=list)  # GradCell
    metadata: dict = field(default_factory=dict)


def write_csv(path_or_file, header, rows, metadata=None):
    """Plain CSV; metadata (config text, hash, seed, corpus) goes first as ``#`` lines."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", encoding="utf-8") if own else path_or_file
    try:
        for key, value in (metadata or {}).items():
            for line in str(value).splitlines() or [""]:
                fh.write(f"# {key}: {line}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    finally:
        if own:
            fh.close()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# ----------------------------------------------------------------------------
# NLL bookkeeping


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_nll(model, stream):
    """Per-position NLL of ``stream[i + 1]`` given the prefix, for i < len - 1."""
    stream = np.asarray(stream, dtype=np.int64)
    if stream.ndim != 1:
        raise DataError("token_nll expects a 1-d stream")
    L = model.cfg.segment_len
    out = np.empty(max(0, len(stream) - 1))
    with nm.no_grad():
        state = model.initial_state()
        for s in range(0, len(stream), L):
            logits, state = model.step(state, stream[s:s + L])
            tgt = stream[s + 1:s + L + 1]
            lp = _log_softmax(logits.data[:len(tgt)])
            out[s:s + len(tgt)] = -lp[np.arange(len(tgt)), tgt]
    return out


def span_nll(model, stream, mask=None):
    """(NLL sum, count) over the target positions selected by ``mask``."""
    with nm.no_grad():
        T = -(-len(stream) // model.cfg.segment_len)
        u = unroll(model, stream, T, target_mask=mask)
    return float(u.nll_sum.item()), u.count


def perplexity(model, stream, lengths):
    """``[(length, ppl)]`` where each length scores the predictions inside its prefix."""
    stream = np.asarray(stream, dtype=np.int64)
    L = model.cfg.segment_len
    lengths = [int(n) for n in lengths]
    if not lengths:
        return []
    for n in lengths:
        if n < L:
            raise ConfigError(f"evaluation length {n} is shorter than segment_len {L}")
    if max(lengths) > len(stream):
        raise DataError(f"stream has {len(stream)} tokens; longest requested length is {max(lengths)}")
    aligned = [n for n in lengths if n % L == 0]
    full = token_nll(model, stream[:max(aligned)]) if aligned else None
    table = []
    for n in lengths:
        # prefixes that end on a segment boundary see exactly the same segments
        nll = full[:n - 1] if n % L == 0 else token_nll(model, stream[:n])
        table.append((n, math.exp(float(nll.mean()))))
    return table


# ----------------------------------------------------------------------------
# recall diagnostics


def argmax_entry(indices, scores):
    """Segment index of the highest-scoring entry; ties go to the most recent."""
    scores = np.asarray(scores).reshape(-1)
    best = np.flatnonzero(scores == scores.max())
    return indices[int(best[-1])]


def recall_events(model, stream):
    if not model.cfg.recall:
        raise ContractError("recall_histogram needs a recall-enabled model")
    stream = np.asarray(stream, dtype=np.int64)
    if len(stream) <= model.cfg.segment_len:
        raise ContractError("recall_histogram needs a stream of at least two segments")
    with nm.no_grad():
        _, state = model.run(stream, record=True)
    return state.recall_log


def histogram_from_events(events):
    hist = Counter()
    for ev in events:
        src = argmax_entry(ev.indices, ev.scores)
        hist[INIT_BIN if src == INIT_INDEX else ev.segment - src] += 1
    return dict(hist)


def recall_histogram(model, stream):
    """Counts of ``n - argmax source segment``; m_init selections land in ``INIT_BIN``."""
    return histogram_from_events(recall_events(model, stream))


def histogram_rows(hist):
    dist = sorted(k for k in hist if k != INIT_BIN)
    rows = [(d, hist[d]) for d in dist]
    if INIT_BIN in hist:
        rows.append((INIT_BIN, hist[INIT_BIN]))
    return rows


# ----------------------------------------------------------------------------
# ablations and sweeps


@dataclass
class PairedResult:
    nll_with: float
    nll_without: float
    count: int
    seed: int | None = None
    config: str = ""

    @property
    def ppl_with(self):
        return math.exp(self.nll_with)

    @property
    def ppl_without(self):
        return math.exp(self.nll_without)


def _episodes(data):
    if isinstance(data, np.ndarray) and data.ndim == 1:
        return [(data, None)]
    return [(e, None) if isinstance(e, np.ndarray) else e for e in data]


def mean_nll(model, data):
    """Token-weighted mean NLL over a stream or a list of (stream, mask) episodes."""
    tot, cnt = 0.0, 0
    for stream, mask in _episodes(data):
        s, c = span_nll(model, stream, mask)
        tot += s
        cnt += c
    return tot / cnt, cnt


def ablate_recall(model_with, model_without, data, seed=None):
    a, b = model_with.cfg, model_without.cfg
    if replace(a, recall=False) != replace(b, recall=False):
        raise ConfigError(f"ablate_recall: configs differ beyond the recall flag: {a} vs {b}")
    if model_with.backbone.cfg != model_without.backbone.cfg:
        raise ConfigError("ablate_recall: backbone configs differ")
    nll_w, n = mean_nll(model_with, data)
    nll_wo, _ = mean_nll(model_without, data)
    return PairedResult(nll_w, nll_wo, n, seed, config=str(a))


def ablate_partial_summarization(model, stream, j_values=None, seed=None):
    L = model.cfg.segment_len
    j_values = [max(1, L // 2), L] if j_values is None else list(j_values)
    rows = []
    for j in j_values:
        if j > L:
            raise ConfigError(f"repr_len {j} exceeds segment_len {L}")
        nll, _ = mean_nll(model.with_config(repr_len=int(j)), stream)
        rows.append(("repr_len", int(j), math.exp(nll), seed))
    return rows


def sweep_cache(model, stream, n_values, seed=None):
    rows = []
    for n in n_values:
        if model.cfg.recall and n < 1:
            raise ConfigError(f"cache_size must be >= 1 in recall mode, got {n}")
        nll, _ = mean_nll(model.with_config(cache_size=int(n)), stream)
        rows.append(("cache_size", int(n), math.exp(nll), seed))
    return rows


def sweep_sensory(train_fn, k_values, stream, segment_len, seed=None):
    """``train_fn(k)`` returns a freshly trained model for sensory size ``k``."""
    for k in k_values:
        if not 0 <= k < segment_len:
            raise ConfigError(f"sensory_len must satisfy 0 <= k < L, got k={k}, L={segment_len}")
    rows = []
    for k in k_values:
        nll, _ = mean_nll(train_fn(int(k)), stream)
        rows.append(("sensory_len", int(k), math.exp(nll), seed))
    return rows


# ----------------------------------------------------------------------------
# gradient stability


@dataclass
class GradCell:
    depth: int
    mode: str
    grad_norm_m_init: float
    grad_norm_HT: float
    finite_ok: bool
    fd_max_rel: float
    fd_max_abs: float
    fd_ok: bool

    def row(self):
        return (self.depth, self.mode, self.grad_norm_m_init, self.grad_norm_HT, self.finite_ok)


GRAD_HEADER = ("depth", "mode", "grad_norm_m_init", "grad_norm_HT", "finite_ok")


def _fd_check(model, stream, depth, param, coords, h, tol):
    def f(_):
        return unroll(model, stream, depth).loss.data

    auto = param.grad.reshape(-1)[coords]
    fd = nm.finite_diff_grad_batched(f, param, h=h, indices=coords)
    rel, absolute = nm.grad_rel_error(auto, fd)
    return float(rel.max()), float(absolute.max()), bool(rel.max() < tol and absolute.max() < tol * 1e-3)


def grad_stability_report(bcfg, hcfg, depths=(2, 5, 10, 15), modes=("recall", "no_recall"), seed=0,
                          fd_coords=6, h=1e-5, tol=1e-4, assert_mode=True):
    """Gradient norms wrt m_init and H_T per (depth, mode), each cell FD-checked."""
    L = hcfg.segment_len
    rng = nm.make_rng(seed + 3)
    stream = rng.integers(0, bcfg.vocab_size, size=max(depths) * L + 1)
    cells = []
    for mode in modes:
        if mode not in ("recall", "no_recall"):
            raise ConfigError(f"unknown mode {mode!r}")
        for depth in depths:
            model = HmtModel.build(bcfg, replace(hcfg, recall=(mode == "recall"), unroll=depth), seed=seed)
            params = model.parameters()
            loss = unroll(model, stream, depth).loss
            nm.backward(loss)
            pr = model.prompts
            g_m = pr.m_init.grad if pr.m_init.grad is not None else np.zeros_like(pr.m_init.data)
            g_t = pr.H_T.grad if (mode == "recall" and pr.H_T.grad is not None) else np.zeros_like(pr.H_T.data)
            finite = bool(all(np.all(np.isfinite(p.grad)) for p in params.values() if p.grad is not None))
            pick = nm.make_rng(seed + 100 * depth).permutation(pr.m_init.data.size)[:fd_coords]
            checks = [_fd_check(model, stream, depth, pr.m_init, pick, h, tol)]
            if mode == "recall":
                checks.append(_fd_check(model, stream, depth, pr.H_T, pick, h, tol))
            cell = GradCell(depth, mode, float(np.linalg.norm(g_m)), float(np.linalg.norm(g_t)), finite,
                            max(c[0] for c in checks), max(c[1] for c in checks), all(c[2] for c in checks))
            for p in params.values():
                p.grad = None
            cells.append(cell)
            if assert_mode and not finite:
                raise StabilityError(f"non-finite gradient at depth {depth} ({mode})")
    return cells


@dataclass
class GradCheckRow:
    param: str
    size: int
    max_rel: float
    max_abs: float
    ok: bool


def gradient_check(model, stream, T, h=1e-5, rel_tol=1e-4, abs_tol=1e-7, small=1e-6, chunk=64,
                   names=None, progress=None):
    """Autodiff vs central differences on every coordinate of every parameter.

    Relative error is used where max(|auto|, |fd|) >= ``small``, absolute error
    below it.
    """
    params = model.parameters()
    for p in params.values():
        p.grad = None
    nm.backward(unroll(model, stream, T).loss)
    auto = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None

    def f(_):
        return unroll(model, stream, T).loss.data

    rows = []
    for name in (names or list(params)):
        p = params[name]
        fd = nm.finite_diff_grad_batched(f, p, h=h, chunk=chunk).data
        rel, absolute = nm.grad_rel_error(auto[name], fd, small=small)
        row = GradCheckRow(name, p.data.size, float(rel.max()), float(absolute.max()),
                           bool(rel.max() < rel_tol and absolute.max() < abs_tol))
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


# ----------------------------------------------------------------------------
# QA


@dataclass
class QaResult:
    nll: float
    accuracy: float | None
    count: int
    recall_hits: float | None = None  # share of questions whose argmax recall lies in their own context


def _answer_mask(seq):
    a0, a1 = seq.answer_span
    if a1 <= a0:
        raise DataError("empty answer span")
    if seq.question_span[1] <= seq.question_span[0]:
        raise DataError("empty question span")
    mask = np.zeros(len(seq.tokens), dtype=bool)
    mask[a0:a1] = True
    return mask


def qa_eval(model, sequences):
    """Answer-span NLL and short-answer accuracy.

    Greedy decoding reproduces the label exactly when every teacher-forced
    argmax over the answer span equals the label token, so accuracy is read
    off one forward pass.
    """
    L = model.cfg.segment_len
    tot, cnt, hits, labelled, rec_hit, rec_n = 0.0, 0, 0, 0, 0, 0
    for seq in sequences:
        mask = _answer_mask(seq)
        toks = np.asarray(seq.tokens, dtype=np.int64)
        with nm.no_grad():
            logits, state = model.run(toks, record=model.cfg.recall)
        a0, a1 = seq.answer_span
        pos = np.arange(a0 - 1, a1 - 1)  # predicting position p + 1
        z = np.concatenate([lg.data for lg in logits])[pos]
        lp = _log_softmax(z)
        tot += float(-lp[np.arange(len(pos)), toks[a0:a1]].sum())
        cnt += len(pos)
        if seq.short_label is not None:
            labelled += 1
            hits += bool(np.array_equal(z.argmax(axis=-1), toks[a0:a1]))
        if model.cfg.recall and state.recall_log:
            q_seg = seq.question_span[0] // L
            ev = next((e for e in state.recall_log if e.segment == q_seg), None)
            if ev is not None:
                src = argmax_entry(ev.indices, ev.scores)
                c0, c1 = seq.context_spans[seq.source]
                rec_n += 1
                rec_hit += src != INIT_INDEX and src * L < c1 and (src + 1) * L > c0
    if cnt == 0:
        raise DataError("qa_eval needs at least one sequence")
    return QaResult(nll=tot / cnt, accuracy=hits / labelled if labelled else None, count=cnt,
                    recall_hits=rec_hit / rec_n if rec_n else None)


# ----------------------------------------------------------------------------
# runtime


def runtime_breakdown(model, stream, warmup=1):
    """Median wall time (seconds) per segment for the four phases of a recall step."""
    if not model.cfg.recall:
        raise ContractError("runtime_breakdown needs a recall-enabled model")
    stream = np.asarray(stream, dtype=np.int64)
    L = model.cfg.segment_len
    bb, pr, cfg = model.backbone, model.prompts, model.cfg
    times = {p: [] for p in RUNTIME_PHASES}
    clock = time.perf_counter
    with nm.no_grad():
        state = model.initial_state()
        for n, s in enumerate(range(0, len(stream), L)):
            h_n = bb.embed(stream[s:s + L])
            entries = list(state.cache)
            prefix = MemoryCache(state.cache.capacity)
            for i, e in entries[:-1]:
                prefix.push(i, e)
            new = entries[-1][1]
            t0 = clock()
            h_sum = extract_representation(h_n, cfg, pr, bb)
            t1 = clock()
            scratch = prepare_recall(h_sum, prefix, pr)
            t2 = clock()
            _ = scratch.Q @ nm.swapaxes(new @ pr.W_k, -1, -2)
            t3 = clock()
            h_s = memory_search_incremental(scratch, prefix, new, pr)
            aug = augment_segment(h_s, state.sensory, h_n)
            t4 = clock()
            _, h_mem = process_segment(aug, h_n.shape[-2], bb)
            t5 = clock()
            state.cache.push(n, h_mem)
            k = min(cfg.sensory_len, h_n.shape[-2])
            state.sensory = h_n[-k:] if k else None
            if n >= warmup:
                times["representation"].append(t1 - t0)
                times["prefix_scores"].append(t2 - t1)
                times["last_entry_score"].append(t3 - t2)
                times["forward"].append(t5 - t4)
    if not times["forward"]:
        raise DataError("runtime_breakdown needs more segments than warmup")
    return [(p, statistics.median(times[p])) for p in RUNTIME_PHASES]
