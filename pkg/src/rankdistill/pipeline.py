"""End-to-end experiment orchestration.

Per seed: pretrain the dense baseline, cache its output distribution, run the
dense-control distillation arm, then iterative prune+distill rounds. Reports
mirror the collapse/recovery/trade-off patterns and feed the timing and
speedup models.
"""

import json
import statistics
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .distill import KDConfig, build_cache, distill, save_cache
from .errors import DataError, InvalidFraction, InvalidTeacher, UsageError
from .evaluate import EvalProtocol, perplexity
from .model import (
    Checkpoint,
    ModelConfig,
    checkpoint_hash,
    forward_batch,
    param_count,
    save_checkpoint,
    _Timer,
)
from .prune import (
    TierSpec,
    build_schedule,
    collect_activation_norms,
    prune_svd,
    prune_wanda,
    wanda_zero_masks,
)
from .train import TrainConfig, train_lm


@dataclass
class RoundConfig:
    target_rho: float
    method: str = "svd"               # "svd" or "wanda"
    tiers: TierSpec = field(default_factory=TierSpec)
    kd: KDConfig = field(default_factory=KDConfig)


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    dense_kd: KDConfig = field(default_factory=KDConfig)
    rounds: list = field(default_factory=list)        # list[RoundConfig]
    cache_k: int = 32
    cache_seq_len: int = 64
    cache_max_sequences: int | None = 2048
    recache_each_round: bool = False
    teacher_source: str = "original_dense"  # original_dense|dense_kd|previous_round
    seeds: list = field(default_factory=lambda: [42])
    corpus_path: str = ""
    validation_path: str = ""
    eval_path: str = ""
    eval_protocol: EvalProtocol = field(default_factory=EvalProtocol)
    out_dir: str = "runs"

    def validate(self):
        rhos = [r.target_rho for r in self.rounds]
        if any(b <= a for a, b in zip(rhos, rhos[1:])):
            raise UsageError("round target_rho must be strictly increasing")
        if self.teacher_source not in (
            "original_dense", "dense_kd", "previous_round"
        ):
            raise UsageError(f"unknown teacher_source {self.teacher_source}")
        check_stream_disjointness(
            self.eval_path, [self.corpus_path, self.validation_path]
        )


@dataclass
class RoundReport:
    round_index: int
    stage: str
    method: str
    rho: float
    pre_kd_ppl: float
    post_kd_ppl: float
    dense_baseline_ppl: float
    dense_kd_ppl: float
    rel_vs_dense: float
    seed: int
    wall_time: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TimingProfile:
    attention_ms: float
    ffn_ms: float
    other_ms: float

    @property
    def fractions(self):
        total = self.attention_ms + self.ffn_ms + self.other_ms
        return {
            "attention": self.attention_ms / total,
            "ffn": self.ffn_ms / total,
            "other": self.other_ms / total,
        }


def check_stream_disjointness(eval_path, training_paths):
    """The evaluation stream must never feed training or calibration."""
    ev = Path(eval_path).resolve()
    for p in training_paths:
        if p and Path(p).resolve() == ev:
            raise DataError(
                f"evaluation stream {eval_path} also used as training input"
            )


def amdahl_max_speedup(fixed_fraction: float,
                       remaining_compute_factor: float) -> float:
    """1 / (f + (1-f)*s): ceiling on speedup when a fraction f of the work
    is untouched and the rest shrinks to factor s."""
    f, s = fixed_fraction, remaining_compute_factor
    if not (0.0 <= f <= 1.0):
        raise InvalidFraction(f"fixed fraction {f} outside [0, 1]")
    if not (0.0 < s <= 1.0):
        raise InvalidFraction(f"compute factor {s} outside (0, 1]")
    return 1.0 / (f + (1.0 - f) * s)


def profile(model: Checkpoint, batch_size=16, seq_len=64, repeats=5,
            seed=0) -> TimingProfile:
    """Median wall-time split of the forward pass; first repeat is warm-up."""
    if repeats < 3:
        raise UsageError("profiling needs at least 3 repeats")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab,
                          size=(batch_size, seq_len), dtype=np.int64)
    samples = []
    for _ in range(repeats + 1):
        timer = _Timer()
        forward_batch(model, tokens, timer=timer)
        samples.append((timer.attention, timer.ffn, timer.other))
    samples = samples[1:]  # discard warm-up
    med = [statistics.median(col) * 1e3 for col in zip(*samples)]
    return TimingProfile(attention_ms=med[0], ffn_ms=med[1], other_ms=med[2])


def _vs_dense(post, dense):
    return (post - dense) / dense


def emit_report(reports, fmt: str, path):
    """Write round reports as JSON (stable field order) or CSV."""
    if not reports:
        raise DataError("no reports to emit")
    rows = [r.to_dict() if isinstance(r, RoundReport) else dict(r)
            for r in reports]
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        cols = ["stage", "rho", "pre_kd_ppl", "post_kd_ppl", "std",
                "rel_vs_dense"]
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(
                format(r.get(c, ""), ".6g") if isinstance(r.get(c), float)
                else str(r.get(c, "")) for c in cols
            ))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    return path


@dataclass
class SeedState:
    """Artifacts of one seed's run, used for control arms and teacher swaps."""
    seed: int
    dense: Checkpoint
    dense_ppl: float
    cache: object
    dense_kd: Checkpoint | None = None
    dense_kd_ppl: float = float("nan")
    current: Checkpoint | None = None


def swap_teacher(state: SeedState, new_teacher: Checkpoint, corpus,
                 cache_k, cache_seq_len, cache_max_sequences=None,
                 out_dir=None):
    """Rebuild the probability cache from a different frozen teacher."""
    if new_teacher.config.vocab != state.dense.config.vocab or \
            cache_seq_len - 1 > new_teacher.config.max_context:
        raise InvalidTeacher("teacher incompatible with cache segmentation")
    cache = build_cache(new_teacher, corpus, k=cache_k, seq_len=cache_seq_len,
                        max_sequences=cache_max_sequences)
    if out_dir is not None:
        save_cache(cache, Path(out_dir) / f"cache_{cache.teacher_hash[:12]}.skdc")
    state.cache = cache
    return cache


def _reseed(cfg, seed):
    """Copy a config dataclass with its RNG seed replaced."""
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["seed"] = seed
    return type(cfg)(**d)


def run_round(state: SeedState, round_cfg: RoundConfig, round_index: int,
              corpus, validation, eval_stream, protocol, dense_mlp_params,
              out_dir=None):
    """One prune -> evaluate -> distill -> evaluate cycle."""
    t0 = time.time()
    base = state.current if state.current is not None else state.dense

    if round_cfg.method == "svd":
        cur_mlp = param_count(base)["mlp"]
        # convert the target (relative to the dense baseline) to a target
        # relative to the current, possibly already-factored, model
        target_vs_cur = 1.0 - (1.0 - round_cfg.target_rho) \
            * dense_mlp_params / cur_mlp
        svds = {}
        schedule = build_schedule(base, round_cfg.tiers,
                                  target_rho=target_vs_cur, svds=svds)
        pruned, prune_rep = prune_svd(base, schedule, svds=svds)
        masks = None
    elif round_cfg.method == "wanda":
        norms = collect_activation_norms(
            state.dense, corpus, n_samples=64, seq_len=64
        )
        pruned, prune_rep = prune_wanda(
            state.dense, norms, round_cfg.target_rho
        )
        masks = wanda_zero_masks(pruned)
    else:
        raise UsageError(f"unknown prune method {round_cfg.method!r}")

    pre = perplexity(pruned, eval_stream, protocol).ppl
    kd = _reseed(round_cfg.kd, state.seed)
    recovered, _ = distill(pruned, state.cache, corpus, validation, kd,
                           zero_masks=masks)
    post = perplexity(recovered, eval_stream, protocol).ppl

    if round_cfg.method == "svd":
        rho = 1.0 - param_count(recovered)["mlp"] / dense_mlp_params
    else:
        rho = prune_rep.rho
    state.current = recovered
    if out_dir is not None:
        save_checkpoint(recovered, Path(out_dir) / f"round{round_index}.skdm")
    return RoundReport(
        round_index=round_index,
        stage=f"round{round_index}_{round_cfg.method}",
        method=round_cfg.method,
        rho=rho,
        pre_kd_ppl=pre,
        post_kd_ppl=post,
        dense_baseline_ppl=state.dense_ppl,
        dense_kd_ppl=state.dense_kd_ppl,
        rel_vs_dense=_vs_dense(post, state.dense_ppl),
        seed=state.seed,
        wall_time=time.time() - t0,
    )


def run_seed(config: PipelineConfig, seed: int, corpus, validation,
             eval_stream, out_dir=None):
    """Full single-seed run: baseline, cache, control arm, rounds."""
    protocol = config.eval_protocol
    model_cfg = _reseed(config.model, seed)
    train_cfg = _reseed(config.pretrain, seed)

    from .model import new_model
    dense, _ = train_lm(new_model(model_cfg), corpus, train_cfg, validation)
    dense_ppl = perplexity(dense, eval_stream, protocol).ppl
    cache = build_cache(dense, corpus, k=config.cache_k,
                        seq_len=config.cache_seq_len,
                        max_sequences=config.cache_max_sequences)
    state = SeedState(seed=seed, dense=dense, dense_ppl=dense_ppl, cache=cache)

    reports = []
    t0 = time.time()
    dense_kd_cfg = _reseed(config.dense_kd, seed)
    dense_kd, _ = distill(dense, cache, corpus, validation, dense_kd_cfg)
    state.dense_kd = dense_kd
    state.dense_kd_ppl = perplexity(dense_kd, eval_stream, protocol).ppl
    reports.append(RoundReport(
        round_index=0, stage="dense_kd_control", method="none", rho=0.0,
        pre_kd_ppl=dense_ppl, post_kd_ppl=state.dense_kd_ppl,
        dense_baseline_ppl=dense_ppl, dense_kd_ppl=state.dense_kd_ppl,
        rel_vs_dense=_vs_dense(state.dense_kd_ppl, dense_ppl),
        seed=seed, wall_time=time.time() - t0,
    ))

    if config.teacher_source == "dense_kd":
        swap_teacher(state, dense_kd, corpus, config.cache_k,
                     config.cache_seq_len, config.cache_max_sequences,
                     out_dir=out_dir)

    dense_mlp = param_count(dense)["mlp"]
    for i, rnd in enumerate(config.rounds, start=1):
        report = run_round(state, rnd, i, corpus, validation, eval_stream,
                           protocol, dense_mlp, out_dir=out_dir)
        reports.append(report)
        if config.recache_each_round or config.teacher_source == "previous_round":
            swap_teacher(state, state.current, corpus, config.cache_k,
                         config.cache_seq_len, config.cache_max_sequences,
                         out_dir=out_dir)

    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(dense, out / "dense.skdm")
        save_checkpoint(dense_kd, out / "dense_kd.skdm")
        save_cache(cache, out / "cache.skdc")
        emit_report(reports, "json", out / "reports.json")
    return state, reports


def aggregate_reports(per_seed_reports):
    """Per-stage mean/std/CoV of post-KD PPL across seeds."""
    by_stage = {}
    for reports in per_seed_reports:
        for r in reports:
            by_stage.setdefault(r.stage, []).append(r)
    rows = []
    for stage, rs in by_stage.items():
        ppls = [r.post_kd_ppl for r in rs]
        mean = statistics.fmean(ppls)
        std = statistics.stdev(ppls) if len(ppls) > 1 else 0.0
        rows.append({
            "stage": stage,
            "rho": statistics.fmean(r.rho for r in rs),
            "pre_kd_ppl": statistics.fmean(r.pre_kd_ppl for r in rs),
            "post_kd_ppl": mean,
            "std": std,
            "cov": std / mean if mean else 0.0,
            "rel_vs_dense": statistics.fmean(r.rel_vs_dense for r in rs),
            "n_seeds": len(rs),
        })
    rows.sort(key=lambda r: r["stage"])
    return rows


def run_pipeline(config: PipelineConfig):
    """Run every seed and write per-seed plus aggregate reports."""
    config.validate()
    corpus = Path(config.corpus_path).read_bytes()
    validation = Path(config.validation_path).read_bytes()
    eval_stream = Path(config.eval_path).read_bytes()

    out_root = Path(config.out_dir)
    per_seed = []
    for seed in config.seeds:
        seed_dir = out_root / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        _, reports = run_seed(config, seed, corpus, validation, eval_stream,
                              out_dir=seed_dir)
        per_seed.append(reports)

    agg = aggregate_reports(per_seed)
    (out_root / "aggregate.json").write_text(
        json.dumps(agg, indent=2, sort_keys=True) + "\n"
    )
    return per_seed, agg
