"""Command-line entry point: ``hmt <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 check failed, 2 config error, 3 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, evalsuite
from . import numerics as nm
from .config import KEYS, parse_config
from .errors import ConfigError, DataError, FormatError, HmtError
from .memory import HmtModel
from .recurrence import (Trainer, check_compatible, load_checkpoint, load_params, save_checkpoint,
                         train_stage1, train_stage2, window_sampler)

log = logging.getLogger("hmt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
TOY = "@toy"  # data path naming the bundled corpus


class CheckFailed(Exception):
    pass


# ----------------------------------------------------------------------------
# shared plumbing


def _ints(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def load_stream(path, split):
    """Token stream for ``path``; ``@toy`` selects a split of the bundled corpus."""
    if path is None:
        raise ConfigError(f"missing required key {'train_path' if split == 'train' else 'eval_path'!r}")
    if path == TOY:
        parts = dict(zip(("train", "val", "test"), datagen.load_toy_corpus().splits()))
        return np.concatenate(parts[split])
    p = Path(path)
    if not p.is_file():
        raise DataError(f"data file not found: {path}")
    return datagen.load_tokens(p)


def build_model(cfg, checkpoint=None):
    model = HmtModel.build(cfg.backbone(), cfg.hmt(), seed=cfg.sub_seed("init"))
    if checkpoint:
        ckpt = load_checkpoint(checkpoint)
        check_compatible(ckpt, model)
        load_params(model, ckpt, strict=False)
    return model


def _meta(cfg, **extra):
    out = {"config_hash": cfg.content_hash(), "seed": cfg.seed}
    out.update(extra)
    out["config"] = cfg.to_text().rstrip("\n")
    return out


def _out_path(cfg, args, default):
    path = Path(args.out) if getattr(args, "out", None) else Path(cfg.out_dir) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _print_rows(header, rows):
    print(",".join(header))
    for r in rows:
        print(",".join(evalsuite._fmt(v) for v in r))


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(cfg, args):
    tokens = load_stream(cfg.train_path, "train")
    sampler = window_sampler(tokens, cfg.unroll, cfg.segment_len)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"stage{cfg.stage}"
    log_path = out_dir / f"train_{tag}.csv"
    model = HmtModel.build(cfg.backbone(), cfg.hmt(), seed=cfg.sub_seed("init"))
    tcfg = cfg.train()
    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as fh:
        if args.resume:
            trainer = Trainer.resume(model, tcfg, sampler, load_checkpoint(args.resume))
            trainer.run(log_file=fh)
        elif cfg.stage == 1:
            fh.write("step,loss,ppl,lr,grad_norm\n")
            trainer = train_stage1(model, sampler, tcfg, log_file=fh)
        else:
            fh.write("step,loss,ppl,lr,grad_norm\n")
            init = load_checkpoint(args.init) if args.init else None
            trainer = train_stage2(model, sampler, tcfg, init=init, log_file=fh)
    ckpt_path = Path(args.out) if args.out else out_dir / f"{tag}.ckpt"
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, trainer.checkpoint(cfg.to_text()))
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"{tag}: {trainer.step} steps, final loss {last.loss:.4f}, checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg, args):
    stream = load_stream(cfg.eval_path, "val")
    model = build_model(cfg, args.checkpoint)
    L = cfg.segment_len
    if args.lengths:
        lengths = _ints(args.lengths)
    else:
        lengths, n = [], L
        while n <= len(stream):
            lengths.append(n)
            n *= 2
    table = evalsuite.perplexity(model, stream, lengths)
    header = ("length", "ppl")
    evalsuite.write_csv(_out_path(cfg, args, "eval.csv"), header, table,
                        _meta(cfg, corpus=cfg.eval_path, checkpoint=args.checkpoint or "none"))
    _print_rows(header, table)
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    rng = nm.make_rng(cfg.sub_seed("eval"))
    stream = rng.integers(0, cfg.vocab_size, size=cfg.unroll * cfg.segment_len + 1)
    model = build_model(cfg, args.checkpoint)
    header = ("param", "size", "max_rel", "max_abs", "ok")

    def show(row):
        print(f"{'ok  ' if row.ok else 'FAIL'} {row.param}: size={row.size} "
              f"max_rel={row.max_rel:.3e} max_abs={row.max_abs:.3e}", flush=True)

    rows = evalsuite.gradient_check(model, stream, cfg.unroll, h=args.h, progress=show)
    evalsuite.write_csv(_out_path(cfg, args, "gradcheck.csv"), header,
                        [(r.param, r.size, r.max_rel, r.max_abs, r.ok) for r in rows], _meta(cfg))
    bad = [r.param for r in rows if not r.ok]
    if bad:
        raise CheckFailed(f"gradient check failed for: {', '.join(bad)}")
    print(f"gradcheck passed: {len(rows)} tensors, {sum(r.size for r in rows)} coordinates")
    return EXIT_OK


def _train_fresh(cfg, tokens, **changes):
    from dataclasses import replace
    run = replace(cfg, **changes).resolve()
    model = HmtModel.build(run.backbone(), run.hmt(), seed=run.sub_seed("init"))
    sampler = window_sampler(tokens, run.unroll, run.segment_len)
    if run.stage == 1:
        return train_stage1(model, sampler, run.train()).model
    return train_stage2(model, sampler, run.train()).model


def cmd_sweep(cfg, args):
    stream = load_stream(cfg.eval_path, "val")
    values = _ints(args.values)
    if args.param in ("cache_size", "repr_len"):
        model = build_model(cfg, args.checkpoint)
        if args.param == "cache_size":
            rows = evalsuite.sweep_cache(model, stream, values, seed=cfg.seed)
        else:
            rows = evalsuite.ablate_partial_summarization(model, stream, values, seed=cfg.seed)
    elif args.param in ("sensory_len", "unroll"):
        tokens = load_stream(cfg.train_path, "train")
        if args.param == "sensory_len":
            # one position table for every arm so initial weights are comparable
            width = max(cfg.max_pos, cfg.segment_len + max(values) + 2)
            rows = evalsuite.sweep_sensory(lambda k: _train_fresh(cfg, tokens, sensory_len=k, max_pos=width),
                                           values, stream, cfg.segment_len, seed=cfg.seed)
        else:
            rows = []
            for t in values:
                nll, _ = evalsuite.mean_nll(_train_fresh(cfg, tokens, unroll=t), stream)
                rows.append(("unroll", t, float(np.exp(nll)), cfg.seed))
    else:
        raise ConfigError(f"unknown sweep parameter {args.param!r}")
    header = ("param", "value", "ppl", "seed")
    evalsuite.write_csv(_out_path(cfg, args, f"sweep_{args.param}.csv"), header, rows,
                        _meta(cfg, corpus=cfg.eval_path))
    _print_rows(header, rows)
    return EXIT_OK


def cmd_hist(cfg, args):
    stream = load_stream(cfg.eval_path, "val")
    if not cfg.recall:
        raise ConfigError("hist needs recall = true")
    model = build_model(cfg, args.checkpoint)
    rows = evalsuite.histogram_rows(evalsuite.recall_histogram(model, stream))
    header = ("distance", "count")
    evalsuite.write_csv(_out_path(cfg, args, "hist.csv"), header, rows, _meta(cfg, corpus=cfg.eval_path))
    _print_rows(header, rows)
    return EXIT_OK


def cmd_qa(cfg, args):
    model = build_model(cfg, args.checkpoint)
    tuples = datagen.synthetic_qa_tuples(args.n, cfg.sub_seed("eval"))
    rows = []
    for m in _ints(args.M):
        res = evalsuite.qa_eval(model, datagen.build_qa_sequences(tuples, m))
        hits = "" if res.recall_hits is None else res.recall_hits
        rows.append((m, res.nll, res.accuracy, hits))
    header = ("M", "answer_nll", "short_accuracy", "recall_hits")
    evalsuite.write_csv(_out_path(cfg, args, "qa.csv"), header, rows, _meta(cfg))
    _print_rows(header, rows)
    return EXIT_OK


def cmd_data(cfg, args):
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    kind = args.builder
    if kind == "concat":
        samples = datagen.load_text_corpus(args.inputs).samples
        streams = datagen.concat_samples(samples, args.length)
        for i, s in enumerate(streams):
            datagen.write_token_file(out.with_name(f"{out.stem}-{i:04d}{out.suffix}"), s)
        print(f"wrote {len(streams)} streams of <= {args.length} tokens")
    elif kind == "interleave":
        if len(args.inputs) != 2:
            raise ConfigError("interleave needs exactly two --inputs")
        a, b = (datagen.load_tokens(p) for p in args.inputs)
        datagen.write_token_file(out, datagen.interleave_samples(a, b, args.chunk))
    elif kind == "dilate":
        if len(args.inputs) != 1:
            raise ConfigError("dilate needs exactly one --inputs file")
        s = datagen.load_tokens(args.inputs[0])
        datagen.write_token_file(out, datagen.dilate_sample(s, args.filler, args.chunk))
    elif kind == "planted":
        task = datagen.gen_planted_recall(args.segments, args.keys, args.vals, args.distance,
                                          cfg.seed, segment_len=cfg.segment_len)
        datagen.write_token_file(out, task.stream)
        print("query_positions," + ";".join(str(int(p)) for p in task.query_positions))
    elif kind == "qa-build":
        tuples = datagen.synthetic_qa_tuples(args.n, cfg.seed)
        seqs = datagen.build_qa_sequences(tuples, args.M)
        rows = []
        for i, s in enumerate(seqs):
            path = out.with_name(f"{out.stem}-{i:04d}{out.suffix}")
            datagen.write_token_file(path, s.tokens)
            rows.append((path.name, *s.question_span, *s.answer_span, s.source,
                         "" if s.short_label is None else s.short_label))
        evalsuite.write_csv(out.with_suffix(".spans.csv"),
                            ("file", "q_start", "q_end", "a_start", "a_end", "source", "label"), rows, _meta(cfg))
    else:
        raise ConfigError(f"unknown data builder {kind!r}")
    return EXIT_OK


def cmd_report(cfg, args):
    if args.kind == "grad":
        depths = _ints(args.depths)
        need = cfg.segment_len + cfg.sensory_len + 2
        bcfg = cfg.backbone()
        if bcfg.max_pos < need:
            raise ConfigError(f"max_pos={bcfg.max_pos} too small; need >= {need}")
        cells = evalsuite.grad_stability_report(bcfg, cfg.hmt(), depths=depths, seed=cfg.seed, assert_mode=False)
        evalsuite.write_csv(_out_path(cfg, args, "grad_report.csv"), evalsuite.GRAD_HEADER,
                            [c.row() for c in cells], _meta(cfg))
        _print_rows(evalsuite.GRAD_HEADER + ("fd_max_rel", "fd_ok"),
                    [c.row() + (c.fd_max_rel, c.fd_ok) for c in cells])
        bad = [f"{c.mode}@{c.depth}" for c in cells if not (c.finite_ok and c.fd_ok)]
        if bad:
            raise CheckFailed(f"gradient stability check failed for: {', '.join(bad)}")
    elif args.kind == "runtime":
        stream = load_stream(cfg.eval_path, "val")[:args.segments * cfg.segment_len]
        rows = evalsuite.runtime_breakdown(build_model(cfg, args.checkpoint), stream)
        evalsuite.write_csv(_out_path(cfg, args, "runtime.csv"), ("phase", "seconds"), rows, _meta(cfg))
        _print_rows(("phase", "seconds"), rows)
    else:
        raise ConfigError(f"unknown report {args.kind!r}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def _parser():
    p = argparse.ArgumentParser(prog="hmt", description="Hierarchical memory transformer experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="output path (default under out_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        grp = sp.add_argument_group("config overrides")
        for key in KEYS:
            grp.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train stage 1 or 2 per the config")
    sp.add_argument("--init", help="stage-1 checkpoint to warm-start stage 2")
    sp.add_argument("--resume", help="checkpoint to continue training from")
    sp = add("eval", cmd_eval, "perplexity by evaluation length")
    sp.add_argument("--checkpoint")
    sp.add_argument("--lengths", help="comma-separated lengths (default L, 2L, 4L, ...)")
    sp = add("gradcheck", cmd_gradcheck, "autodiff vs finite differences on every parameter")
    sp.add_argument("--checkpoint")
    sp.add_argument("--h", type=float, default=1e-5)
    sp = add("sweep", cmd_sweep, "cache / summary / sensory / depth sweeps")
    sp.add_argument("--param", required=True, choices=("cache_size", "repr_len", "sensory_len", "unroll"))
    sp.add_argument("--values", required=True)
    sp.add_argument("--checkpoint")
    sp = add("hist", cmd_hist, "recall distance histogram")
    sp.add_argument("--checkpoint")
    sp = add("qa", cmd_qa, "synthetic multi-context QA evaluation")
    sp.add_argument("--checkpoint")
    sp.add_argument("--M", default="1,2,4")
    sp.add_argument("--n", type=int, default=12)
    sp = add("data", cmd_data, "dataset builders writing HMTD token files")
    sp.add_argument("builder", choices=("concat", "interleave", "dilate", "planted", "qa-build"))
    sp.add_argument("--inputs", nargs="*", default=[])
    sp.add_argument("--output", required=True)
    sp.add_argument("--length", type=int, default=1024)
    sp.add_argument("--chunk", type=int, default=256)
    sp.add_argument("--filler", type=int, default=datagen.FILLER)
    sp.add_argument("--segments", type=int, default=9)
    sp.add_argument("--distance", type=int, default=8)
    sp.add_argument("--keys", default="ABCDEFGHIJKLMNOP")
    sp.add_argument("--vals", default="0123")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--M", type=int, default=3)
    sp = add("report", cmd_report, "gradient-stability or runtime report")
    sp.add_argument("kind", choices=("grad", "runtime"))
    sp.add_argument("--depths", default="2,5,10,15")
    sp.add_argument("--segments", type=int, default=16)
    sp.add_argument("--checkpoint")
    return p


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:  # argparse usage errors are config errors
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = parse_config(args.config, overrides)
        return args.fn(cfg, args)
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (HmtError, AssertionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
