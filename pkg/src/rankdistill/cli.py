"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .distill import KDConfig, build_cache, distill, load_cache, save_cache
from .errors import DataError, NumericalFailure, RankDistillError, UsageError
from .evaluate import EvalProtocol, perplexity
from .model import ModelConfig, load_checkpoint, new_model, save_checkpoint
from .pipeline import (
    PipelineConfig,
    RoundConfig,
    amdahl_max_speedup,
    emit_report,
    profile,
    run_pipeline,
)
from .prune import (
    TierSpec,
    build_schedule,
    collect_activation_norms,
    prune_svd,
    prune_wanda,
    PruneSchedule,
)
from .train import TrainConfig, train_lm


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {path}")
    return p.read_bytes()


def _cmd_train(args):
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model,
                      n_heads=args.heads, d_ff=args.d_ff,
                      max_context=args.max_context, seed=args.seed)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch,
                       seq_len=args.seq, learning_rate=args.lr,
                       seed=args.seed, eval_every=args.eval_every)
    model, history = train_lm(new_model(cfg), _read(args.corpus), tcfg,
                              _read(args.validation))
    save_checkpoint(model, args.out)
    if args.history:
        history.to_csv(args.history)
    print(f"saved {args.out}  (final val ppl {history.records[-1][2]:.4f})")


def _cmd_cache(args):
    teacher = load_checkpoint(args.checkpoint)
    cache = build_cache(teacher, _read(args.corpus), k=args.k,
                        seq_len=args.seq, max_sequences=args.max_sequences)
    save_cache(cache, args.out)
    print(f"saved {args.out}  ({cache.n_sequences} sequences, k={cache.k}, "
          f"teacher {cache.teacher_hash[:12]})")


def _cmd_prune(args):
    model = load_checkpoint(args.checkpoint)
    if args.method == "svd":
        tiers = TierSpec()
        if args.tiers:
            tiers = TierSpec(**json.loads(Path(args.tiers).read_text()))
        svds = {}
        schedule = build_schedule(model, tiers, target_rho=args.target_rho,
                                  svds=svds)
        pruned, report = prune_svd(model, schedule, svds=svds)
        if args.schedule_out:
            schedule.to_json(args.schedule_out)
    else:
        if not args.calibration:
            raise UsageError("--calibration is required for wanda pruning")
        norms = collect_activation_norms(
            model, _read(args.calibration), n_samples=args.calib_samples,
            seq_len=min(64, model.config.max_context))
        pruned, report = prune_wanda(model, norms, args.target_rho)
    save_checkpoint(pruned, args.out)
    if args.report:
        report.to_json(args.report)
    print(f"saved {args.out}  (rho={report.rho:.4f}, "
          f"mlp {report.mlp_params_before} -> {report.mlp_params_after})")


def _cmd_distill(args):
    student = load_checkpoint(args.checkpoint)
    cache = load_cache(args.cache)
    cfg = KDConfig(alpha=args.alpha, temperature=args.temp,
                   learning_rate=args.lr, max_steps=args.steps,
                   eval_every=args.eval_every, patience=args.patience,
                   seed=args.seed)
    model, history = distill(student, cache, _read(args.corpus),
                             _read(args.validation), cfg)
    save_checkpoint(model, args.out)
    if args.history:
        history.to_csv(args.history)
    print(f"saved {args.out}  (best val ppl "
          f"{min(r[2] for r in history.records):.4f})")


def _cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    protocol = EvalProtocol(context_len=args.ctx, stride=args.stride)
    result = perplexity(model, _read(args.text), protocol)
    if args.json:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        print(f"mean_nll={result.mean_nll:.6f}  ppl={result.ppl:.4f}  "
              f"tokens={result.token_count}")


def _cmd_profile(args):
    model = load_checkpoint(args.checkpoint)
    prof = profile(model, batch_size=args.batch, seq_len=args.seq,
                   repeats=args.repeats)
    fr = prof.fractions
    print(f"attention {prof.attention_ms:.3f} ms ({fr['attention']:.1%})  "
          f"ffn {prof.ffn_ms:.3f} ms ({fr['ffn']:.1%})  "
          f"other {prof.other_ms:.3f} ms ({fr['other']:.1%})")
    if args.amdahl:
        ceiling = amdahl_max_speedup(fr["attention"] + fr["other"],
                                     args.amdahl)
        print(f"amdahl ceiling at ffn factor {args.amdahl}: {ceiling:.4f}x")


def _cmd_pipeline(args):
    raw = json.loads(Path(args.config).read_text())
    cfg = pipeline_config_from_dict(raw)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    per_seed, agg = run_pipeline(cfg)
    for row in agg:
        print(f"{row['stage']:24s} rho={row['rho']:.3f} "
              f"pre={row['pre_kd_ppl']:.3f} post={row['post_kd_ppl']:.3f} "
              f"std={row['std']:.3f} vs_dense={row['rel_vs_dense']:+.1%}")


def _cmd_report(args):
    rows = json.loads(Path(args.reports).read_text())
    emit_report(rows, args.format, args.out)
    print(f"wrote {args.out}")


def _cmd_make_data(args):
    paths = corpus_mod.write_default_corpora(args.out_dir)
    for name, p in paths.items():
        print(f"{name}: {p} ({p.stat().st_size} bytes)")


def pipeline_config_from_dict(raw: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if "model" in raw:
        cfg.model = ModelConfig(**raw["model"])
    if "pretrain" in raw:
        cfg.pretrain = TrainConfig(**raw["pretrain"])
    if "dense_kd" in raw:
        cfg.dense_kd = KDConfig(**raw["dense_kd"])
    rounds = []
    for r in raw.get("rounds", []):
        rc = RoundConfig(target_rho=r["target_rho"],
                         method=r.get("method", "svd"))
        if "tiers" in r:
            rc.tiers = TierSpec(**r["tiers"])
        if "kd" in r:
            rc.kd = KDConfig(**r["kd"])
        rounds.append(rc)
    cfg.rounds = rounds
    for key in ("cache_k", "cache_seq_len", "cache_max_sequences",
                "recache_each_round", "teacher_source", "seeds",
                "corpus_path", "validation_path", "eval_path", "out_dir"):
        if key in raw:
            setattr(cfg, key, raw[key])
    if "eval_protocol" in raw:
        cfg.eval_protocol = EvalProtocol(**raw["eval_protocol"])
    return cfg


def build_parser():
    p = _Parser(prog="rankdistill",
                description="low-rank pruning + offline self-distillation lab")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain the dense baseline")
    t.add_argument("--corpus", required=True)
    t.add_argument("--validation", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seq", type=int, default=64)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=512)
    t.add_argument("--max-context", type=int, default=256)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=42)
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("cache", help="cache teacher top-k probabilities")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=int, default=32)
    c.add_argument("--seq", type=int, default=64)
    c.add_argument("--max-sequences", type=int, default=None)
    c.set_defaults(func=_cmd_cache)

    pr = sub.add_parser("prune", help="prune MLP matrices")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--method", choices=("svd", "wanda"), default="svd")
    pr.add_argument("--target-rho", type=float, default=None)
    pr.add_argument("--tiers", help="JSON file with TierSpec fields")
    pr.add_argument("--calibration", help="calibration stream (wanda)")
    pr.add_argument("--calib-samples", type=int, default=64)
    pr.add_argument("--schedule-out")
    pr.add_argument("--report")
    pr.set_defaults(func=_cmd_prune)

    d = sub.add_parser("distill", help="recover against a frozen cache")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--cache", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--validation", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--history")
    d.add_argument("--alpha", type=float, default=0.5)
    d.add_argument("--temp", type=float, default=2.0)
    d.add_argument("--lr", type=float, default=3e-5)
    d.add_argument("--steps", type=int, default=1000)
    d.add_argument("--eval-every", type=int, default=50)
    d.add_argument("--patience", type=int, default=3)
    d.add_argument("--seed", type=int, default=42)
    d.set_defaults(func=_cmd_distill)

    e = sub.add_parser("eval", help="sliding-window perplexity")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--text", required=True)
    e.add_argument("--ctx", type=int, default=128)
    e.add_argument("--stride", type=int, default=64)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=_cmd_eval)

    pf = sub.add_parser("profile", help="forward-pass wall-time split")
    pf.add_argument("--checkpoint", required=True)
    pf.add_argument("--batch", type=int, default=16)
    pf.add_argument("--seq", type=int, default=64)
    pf.add_argument("--repeats", type=int, default=5)
    pf.add_argument("--amdahl", type=float, default=None,
                    help="FFN compute factor for the speedup ceiling")
    pf.set_defaults(func=_cmd_profile)

    pl = sub.add_parser("pipeline", help="run the full experiment")
    pl.add_argument("--config", required=True)
    pl.add_argument("--seeds", help="comma-separated seed override")
    pl.set_defaults(func=_cmd_pipeline)

    rp = sub.add_parser("report", help="re-emit reports as csv/json")
    rp.add_argument("--reports", required=True, help="reports.json path")
    rp.add_argument("--format", choices=("csv", "json"), default="csv")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=_cmd_report)

    md = sub.add_parser("make-data", help="write the synthetic corpora")
    md.add_argument("--out-dir", default="data")
    md.set_defaults(func=_cmd_make_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except RankDistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
