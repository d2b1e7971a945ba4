"""Byte-level corpora and the dataset builders used by the experiments."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, FormatError

FILLER = 36  # b"$"
TOKEN_MAGIC = b"HMTD"

# QA rendering; separator bytes are a fixed convention of this package
CONTEXT_SEP = b"\n"
QUESTION_TAG = b"\nQ: "
ANSWER_TAG = b"\nA: "
SHORT_LABELS = (b"yes", b"no", b"maybe")


def byte_tokenize(text):
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(tokens):
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())


@dataclass
class Corpus:
    samples: list
    provenance: list = field(default_factory=list)
    fractions: tuple = (0.75, 0.15, 0.10)
    seed: int = 0

    def splits(self):
        """Contiguous train/val/test partition: first 75%, next 15%, rest."""
        n = len(self.samples)
        a = int(round(n * self.fractions[0]))
        b = a + int(round(n * self.fractions[1]))
        return self.samples[:a], self.samples[a:b], self.samples[b:]

    def stream(self):
        if not self.samples:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(s, dtype=np.int64) for s in self.samples])


def load_text_corpus(paths, sample_sep=b"\n\n"):
    """Every file is split into samples on blank lines."""
    samples, prov = [], []
    for path in paths:
        data = Path(path).read_bytes()
        for chunk in data.split(sample_sep):
            if chunk.strip():
                samples.append(byte_tokenize(chunk + b"\n"))
        prov.append(str(path))
    if not samples:
        raise DataError(f"no samples found in {', '.join(map(str, paths))}")
    return Corpus(samples=samples, provenance=prov)


def toy_corpus_path():
    return resources.files("hmt") / "data" / "toy_corpus.txt"


def load_toy_corpus():
    with resources.as_file(toy_corpus_path()) as p:
        corpus = load_text_corpus([p])
    corpus.provenance = ["hmt/data/toy_corpus.txt"]
    return corpus


def load_tokens(path):
    """Token stream from an HMTD file, or raw bytes from anything else."""
    data = Path(path).read_bytes()
    if data[:4] == TOKEN_MAGIC:
        return read_token_bytes(data)
    return byte_tokenize(data)


def write_token_file(path, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise DataError("token ids must fit in u16")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<I", tokens.size))
        fh.write(tokens.astype("<u2").tobytes())


def read_token_bytes(data):
    if data[:4] != TOKEN_MAGIC:
        raise FormatError("bad token-file magic", 0)
    if len(data) < 8:
        raise FormatError("truncated token-file header", len(data))
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 2 * n:
        raise FormatError(f"token file declares {n} ids but holds {(len(data) - 8) // 2}", len(data))
    return np.frombuffer(data[8:], dtype="<u2").astype(np.int64)


# ----------------------------------------------------------------------------
# builders


def concat_samples(samples, target_length):
    if target_length < 1:
        raise ConfigError(f"target_length must be >= 1, got {target_length}")
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in samples]) if samples else np.zeros(0, np.int64)
    return [flat[i:i + target_length] for i in range(0, len(flat), target_length)]


def interleave_samples(a, b, chunk=256):
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    parts = []
    for i in range(0, max(len(a), len(b)), chunk):
        parts.append(a[i:i + chunk])
        parts.append(b[i:i + chunk])
    return np.concatenate(parts) if parts else np.zeros(0, np.int64)


def deinterleave(stream, len_a, len_b, chunk=256):
    """Inverse of ``interleave_samples`` given the original lengths."""
    stream = np.asarray(stream, dtype=np.int64)
    a, b, pos = [], [], 0
    for i in range(0, max(len_a, len_b), chunk):
        na = max(0, min(chunk, len_a - i))
        nb = max(0, min(chunk, len_b - i))
        a.append(stream[pos:pos + na])
        pos += na
        b.append(stream[pos:pos + nb])
        pos += nb
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, np.int64)  # noqa: E731
    return cat(a), cat(b)


def dilate_sample(s, filler_token=FILLER, run=256):
    if run < 1:
        raise ConfigError(f"run must be >= 1, got {run}")
    s = np.asarray(s, dtype=np.int64)
    fill = np.full(run, filler_token, dtype=np.int64)
    parts = []
    for i in range(0, len(s), run):
        parts.append(s[i:i + run])
        parts.append(fill)
    return np.concatenate(parts) if parts else np.zeros(0, np.int64)


def strip_dilation(stream, run=256, filler_token=FILLER):
    """Drop every filler block inserted by ``dilate_sample``."""
    stream = np.asarray(stream, dtype=np.int64)
    keep, pos = [], 0
    while pos < len(stream):
        n = min(run, len(stream) - pos - run)
        if n <= 0 or np.any(stream[pos + n:pos + n + run] != filler_token):
            raise DataError(f"malformed dilated stream at offset {pos}")
        keep.append(stream[pos:pos + n])
        pos += n + run
    return np.concatenate(keep) if keep else np.zeros(0, np.int64)


@dataclass
class QaTuple:
    context: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    short_label: int | None = None

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.int64)
        self.question = np.asarray(self.question, dtype=np.int64)
        self.answer = np.asarray(self.answer, dtype=np.int64)
        if not len(self.context) or not len(self.question):
            raise DataError("QA tuple needs non-empty context and question")


@dataclass
class QaSequence:
    tokens: np.ndarray
    context_spans: list  # [(start, end)] for every context
    question_span: tuple
    answer_span: tuple
    source: int  # index of the tuple the question belongs to
    short_label: int | None = None


def build_qa_sequences(tuples, M):
    """M sequences ``C_0 .. C_{M-1} Q_i A_i`` sharing the concatenated context prefix."""
    if M < 1:
        raise DataError("build_qa_sequences needs M >= 1")
    if M > len(tuples):
        raise DataError(f"M={M} exceeds the {len(tuples)} tuples available")
    sep = byte_tokenize(CONTEXT_SEP)
    q_tag, a_tag = byte_tokenize(QUESTION_TAG), byte_tokenize(ANSWER_TAG)
    prefix, spans, pos = [], [], 0
    for i, t in enumerate(tuples[:M]):
        if i:
            prefix.append(sep)
            pos += len(sep)
        prefix.append(t.context)
        spans.append((pos, pos + len(t.context)))
        pos += len(t.context)
    prefix = np.concatenate(prefix)
    out = []
    for i, t in enumerate(tuples[:M]):
        q0 = len(prefix) + len(q_tag)
        a0 = q0 + len(t.question) + len(a_tag)
        toks = np.concatenate([prefix, q_tag, t.question, a_tag, t.answer])
        out.append(QaSequence(tokens=toks, context_spans=list(spans), question_span=(q0, q0 + len(t.question)),
                              answer_span=(a0, a0 + len(t.answer)), source=i, short_label=t.short_label))
    return out


_WORDS = (b"cell", b"gene", b"dose", b"trial", b"blood", b"liver", b"renal", b"tumor",
          b"drug", b"serum", b"nerve", b"bone", b"heart", b"lung", b"skin", b"virus")


def synthetic_qa_tuples(n, seed, context_len=48):
    """Balanced 3-label tuples; the label is decided by a marker word planted in the context."""
    rng = nm.make_rng(seed)
    out = []
    for i in range(n):
        label = i % 3
        subject = _WORDS[int(rng.integers(len(_WORDS)))]
        filler = b" ".join(_WORDS[int(k)] for k in rng.integers(0, len(_WORDS), context_len // 5))
        ctx = subject + b" is " + SHORT_LABELS[label] + b". " + filler
        q = b"is " + subject + b"?"
        out.append(QaTuple(byte_tokenize(ctx), byte_tokenize(q), byte_tokenize(SHORT_LABELS[label]), label))
    return out


# ----------------------------------------------------------------------------
# planted recall


@dataclass
class PlantedRecall:
    stream: np.ndarray
    query_positions: np.ndarray  # positions of the answer value tokens
    key_segment: int
    query_segment: int
    segment_len: int


def _render_alphabet(alpha):
    return np.array(sorted(set(alpha)), dtype=np.int64)


def gen_planted_recall(num_segments, key_alphabet, value_alphabet, distance, seed,
                       segment_len=16, distractor_alphabet=None):
    """Segments ``[key, value, distractors...]``; the last segment repeats an earlier key.

    Segment ``i < num_segments - 1`` binds a distinct key to a value. The final
    segment opens with the key bound ``distance`` segments earlier followed by
    its value, whose positions are returned for scoring.
    """
    keys = _render_alphabet(byte_tokenize(key_alphabet) if isinstance(key_alphabet, (str, bytes)) else key_alphabet)
    vals = _render_alphabet(byte_tokenize(value_alphabet) if isinstance(value_alphabet, (str, bytes)) else value_alphabet)
    if distractor_alphabet is None:
        distractor_alphabet = np.array([c for c in range(97, 123) if c not in keys and c not in vals])
    dis = _render_alphabet(byte_tokenize(distractor_alphabet) if isinstance(distractor_alphabet, (str, bytes))
                           else distractor_alphabet)
    if set(keys) & set(vals) or set(keys) & set(dis) or set(vals) & set(dis):
        raise ConfigError("planted recall: key, value and distractor alphabets must be disjoint")
    if not 1 <= distance < num_segments:
        raise ConfigError(f"distance must satisfy 1 <= distance < num_segments, got {distance}")
    if len(keys) < num_segments - 1:
        raise ConfigError(f"need {num_segments - 1} distinct keys, alphabet has {len(keys)}")
    if segment_len < 3:
        raise ConfigError("segment_len must be >= 3 for a binding")
    rng = nm.make_rng(seed)
    chosen = rng.permutation(keys)[:num_segments - 1]
    bound = rng.choice(vals, size=num_segments - 1)
    segs = []
    for i in range(num_segments - 1):
        body = rng.choice(dis, size=segment_len - 2)
        segs.append(np.concatenate([[chosen[i]], [bound[i]], body]))
    q = num_segments - 1
    src = q - distance
    body = rng.choice(dis, size=segment_len - 2)
    segs.append(np.concatenate([[chosen[src]], [bound[src]], body]))
    stream = np.concatenate(segs).astype(np.int64)
    return PlantedRecall(stream=stream, query_positions=np.array([q * segment_len + 1]),
                         key_segment=src, query_segment=q, segment_len=segment_len)


def planted_mask(task):
    mask = np.zeros(len(task.stream), dtype=bool)
    mask[task.query_positions] = True
    return mask
