"""Acceptance gate: exact numerical suites plus directional pattern checks
over a small multi-seed experiment.

Run with -v to get one pass/fail line per criterion. The experiment fixture
(criteria 5-11 and 15) pretrains three seeds and is the slow part; everything
else is exact and fast. Set RANKDISTILL_ACCEPTANCE_CACHE to a directory to
reuse experiment artifacts across local runs while iterating.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from rankdistill.distill import (
    KDConfig,
    ProbabilityCache,
    build_cache,
    deserialize_cache,
    distill,
    kd_loss_and_dlogits,
    load_cache,
    segment_corpus,
    serialize_cache,
)
from rankdistill.evaluate import EvalProtocol, perplexity
from rankdistill.linalg import FactoredLinear, svd, truncate
from rankdistill.model import (
    ModelConfig,
    deserialize_checkpoint,
    forward_batch,
    load_checkpoint,
    new_model,
    param_count,
    serialize_checkpoint,
)
from rankdistill.pipeline import (
    PipelineConfig,
    RoundConfig,
    amdahl_max_speedup,
    profile,
    run_pipeline,
)
from rankdistill.prune import (
    PruneSchedule,
    ScheduleEntry,
    TierSpec,
    build_schedule,
    collect_activation_norms,
    prune_svd,
    prune_wanda,
    wanda_zero_masks,
)
from rankdistill.train import TrainConfig, backward_batch, grad_check

DATA = Path(__file__).resolve().parent.parent / "data"

MODEL = dict(n_layers=4, d_model=64, n_heads=4, d_ff=48, max_context=128)
PRETRAIN = dict(steps=16000, batch_size=8, seq_len=64, learning_rate=3e-4,
                eval_every=500)
KD = dict(alpha=0.5, temperature=2.0, learning_rate=3e-4, max_steps=800,
          eval_every=50, patience=3)
SEEDS = [1, 2, 3]
RHOS = (0.15, 0.32, 0.55)
PROTOCOL = EvalProtocol(context_len=64, stride=32)
EVAL_BYTES = 32768


def _mean(xs):
    return float(np.mean(list(xs)))


def _detail(name, text):
    print(f"\n[{name}] {text}")


# ---------------------------------------------------------------------------
# the multi-seed experiment backing criteria 5-11 and 15


def _extra_arms(seed, root, corpus, validation, eval_stream):
    """Arms the main pipeline does not produce: direct dense collapse at
    rho~0.32, the 50% unstructured-prune arm, and the improved-teacher swap
    at rho~0.55."""
    sd = root / "runs" / f"seed{seed}"
    dense = load_checkpoint(sd / "dense.skdm")
    dense_kd = load_checkpoint(sd / "dense_kd.skdm")
    cache = load_cache(sd / "cache.skdc")
    dense_ppl = perplexity(dense, eval_stream, PROTOCOL).ppl
    out = {}

    sched = build_schedule(dense, TierSpec(), target_rho=0.32)
    pruned, rep = prune_svd(dense, sched)
    out["collapse_rho"] = rep.rho
    out["collapse_ratio"] = perplexity(pruned, eval_stream,
                                       PROTOCOL).ppl / dense_ppl

    norms = collect_activation_norms(dense, corpus, n_samples=64, seq_len=64)
    pw, _ = prune_wanda(dense, norms, 0.5)
    out["wanda_pre_ratio"] = perplexity(pw, eval_stream,
                                        PROTOCOL).ppl / dense_ppl
    rec, _ = distill(pw, cache, corpus, validation,
                     KDConfig(**KD, seed=seed),
                     zero_masks=wanda_zero_masks(pw))
    out["wanda_post_ratio"] = perplexity(rec, eval_stream,
                                         PROTOCOL).ppl / dense_ppl

    # rebuild the round-3 pruned model exactly as the pipeline did (same base
    # checkpoint, same deterministic schedule), then recover it against a
    # cache from the improved control-arm teacher instead
    round2 = load_checkpoint(sd / "round2.skdm")
    dense_mlp = param_count(dense)["mlp"]
    cur_mlp = param_count(round2)["mlp"]
    target = 1.0 - (1.0 - RHOS[2]) * dense_mlp / cur_mlp
    svds = {}
    sched = build_schedule(round2, TierSpec(), target_rho=target, svds=svds)
    pruned55, _ = prune_svd(round2, sched, svds=svds)
    kd_cache = build_cache(dense_kd, corpus, k=32, seq_len=64,
                           max_sequences=2048)
    rec, _ = distill(pruned55, kd_cache, corpus, validation,
                     KDConfig(**KD, seed=seed))
    out["swap_post_ppl"] = perplexity(rec, eval_stream, PROTOCOL).ppl
    return out


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    cache_dir = os.environ.get("RANKDISTILL_ACCEPTANCE_CACHE")
    if cache_dir and (Path(cache_dir) / "summary.json").exists():
        return json.loads((Path(cache_dir) / "summary.json").read_text())

    root = Path(cache_dir) if cache_dir else tmp_path_factory.mktemp("accept")
    root.mkdir(parents=True, exist_ok=True)
    corpus = (DATA / "train.txt").read_bytes()
    validation = (DATA / "val.txt").read_bytes()
    eval_stream = (DATA / "eval.txt").read_bytes()[:EVAL_BYTES]
    eval_slice = root / "eval_slice.txt"
    eval_slice.write_bytes(eval_stream)

    config = PipelineConfig(
        model=ModelConfig(**MODEL),
        pretrain=TrainConfig(**PRETRAIN),
        dense_kd=KDConfig(**KD),
        rounds=[RoundConfig(target_rho=r, kd=KDConfig(**KD)) for r in RHOS],
        cache_k=32, cache_seq_len=64, cache_max_sequences=2048,
        seeds=list(SEEDS),
        corpus_path=str(DATA / "train.txt"),
        validation_path=str(DATA / "val.txt"),
        eval_path=str(eval_slice),
        eval_protocol=PROTOCOL,
        out_dir=str(root / "runs"),
    )
    t0 = time.time()
    per_seed, agg = run_pipeline(config)
    full_minutes = (time.time() - t0) / 60.0

    arms = {str(s): _extra_arms(s, root, corpus, validation, eval_stream)
            for s in SEEDS}

    smoke = PipelineConfig(
        model=ModelConfig(**MODEL),
        pretrain=TrainConfig(**{**PRETRAIN, "steps": 2000}),
        dense_kd=KDConfig(**{**KD, "max_steps": 200}),
        rounds=[RoundConfig(target_rho=r,
                            kd=KDConfig(**{**KD, "max_steps": 200}))
                for r in (0.15, 0.35)],
        cache_k=32, cache_seq_len=64, cache_max_sequences=1024,
        seeds=[1],
        corpus_path=str(DATA / "train.txt"),
        validation_path=str(DATA / "val.txt"),
        eval_path=str(eval_slice),
        eval_protocol=PROTOCOL,
        out_dir=str(root / "smoke"),
    )
    t0 = time.time()
    run_pipeline(smoke)
    smoke_minutes = (time.time() - t0) / 60.0

    summary = {
        "reports": [[r.to_dict() for r in reports] for reports in per_seed],
        "aggregate": agg,
        "arms": arms,
        "full_minutes": full_minutes,
        "smoke_minutes": smoke_minutes,
    }
    if cache_dir:
        (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _stage_rows(experiment, stage):
    return [r for reports in experiment["reports"] for r in reports
            if r["stage"] == stage]


# ---------------------------------------------------------------------------
# exact suites


def test_criterion_01_svd_oracle_equivalence():
    rng = np.random.default_rng(11)
    t0 = time.time()
    worst_sigma, worst_orth = 0.0, 0.0
    for _ in range(200):
        m, n = rng.integers(1, 17, size=2)
        w = rng.normal(0.0, rng.uniform(0.1, 5.0), size=(m, n))
        res = svd(w)
        oracle = np.sqrt(np.clip(
            np.linalg.eigvalsh(w.T @ w)[::-1][: len(res.sigma)], 0.0, None))
        scale = max(oracle[0], 1e-12)
        worst_sigma = max(worst_sigma,
                          float(np.abs(res.sigma - oracle).max() / scale))
        for q in (res.u, res.v):
            eye = np.eye(q.shape[1])
            worst_orth = max(worst_orth,
                             float(np.abs(q.T @ q - eye).max()))
    elapsed = time.time() - t0
    _detail("criterion 1",
            f"200 matrices: sigma err {worst_sigma:.2e} (<=1e-4 rel), "
            f"orthonormality err {worst_orth:.2e} (<=1e-4), {elapsed:.1f}s")
    assert worst_sigma <= 1e-4
    assert worst_orth <= 1e-4
    assert elapsed < 10.0


def test_criterion_02_truncation_residual_identity():
    rng = np.random.default_rng(12)
    t0 = time.time()
    worst = 0.0
    for _ in range(50):
        m, n = rng.integers(2, 13, size=2)
        w = rng.normal(0.0, 1.0, size=(m, n))
        res = svd(w)
        s2 = res.sigma.astype(np.float64) ** 2
        for r in range(1, len(res.sigma) + 1):
            resid = float(np.linalg.norm(w - truncate(res, r).materialize())
                          ** 2)
            tail = float(s2[r:].sum())
            worst = max(worst, abs(resid - tail) / max(tail, 1e-9 * s2.sum()))
    elapsed = time.time() - t0
    _detail("criterion 2",
            f"50 matrices, all ranks: residual-vs-tail-energy err "
            f"{worst:.2e} (<=1e-3 rel), {elapsed:.1f}s")
    assert worst <= 1e-3
    assert elapsed < 10.0


def test_criterion_03_gradient_exactness():
    t0 = time.time()
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=2, d_ff=48,
                      max_context=32, seed=3)
    rng = np.random.default_rng(13)
    tokens = rng.integers(0, 256, size=(2, 17))
    per_tensor = 8

    dense = new_model(cfg, dtype=np.float64)
    n_coords = per_tensor * len(dense.tensors)
    err_dense = grad_check(dense, tokens, samples_per_tensor=per_tensor,
                           seed=0)

    factored = dense.copy()
    for key in factored.mlp_keys():
        w = factored.tensors[key]
        fac = truncate(svd(w), min(w.shape) // 2)
        factored.tensors[key] = FactoredLinear(fac.a, fac.b, fac.r)
    n_coords += per_tensor * (len(factored.tensors) + 2 * cfg.n_layers * 3
                              - cfg.n_layers * 3)
    err_fact = grad_check(factored, tokens, samples_per_tensor=per_tensor,
                          seed=1)

    corpus = bytes(rng.integers(32, 127, size=512).astype(np.uint8).tolist())
    cache = build_cache(dense.astype(np.float32), corpus, k=8, seq_len=16,
                        max_sequences=4)
    wins = segment_corpus(corpus, 16, 4)
    kd_cfg = KDConfig(alpha=0.5, temperature=2.0)

    def kd_fn(m):
        logits, acts = forward_batch(m, wins[:, :-1])
        loss, dlogits, _ = kd_loss_and_dlogits(
            logits, cache.ids, cache.probs, cache.residual, wins[:, 1:],
            kd_cfg)
        return loss, backward_batch(m, acts, dlogits)

    n_coords += per_tensor * len(dense.tensors)
    err_kd = grad_check(dense, wins, loss_fn=kd_fn,
                        samples_per_tensor=per_tensor, seed=2)

    elapsed = time.time() - t0
    worst = max(err_dense, err_fact, err_kd)
    _detail("criterion 3",
            f"{n_coords} coords (dense {err_dense:.2e}, factored "
            f"{err_fact:.2e}, kd {err_kd:.2e}); worst {worst:.2e} "
            f"(<=1e-4 rel), {elapsed:.0f}s")
    assert n_coords >= 500
    assert worst <= 1e-4
    assert elapsed < 120.0


def test_criterion_04_identity_prune():
    t0 = time.time()
    model = new_model(ModelConfig(n_layers=3, d_model=32, n_heads=2, d_ff=64,
                                  max_context=64, seed=14))
    stream = (DATA / "val.txt").read_bytes()[:4096]
    proto = EvalProtocol(context_len=32, stride=16)
    base = perplexity(model, stream, proto).ppl

    r = min(32, 64)
    sched = PruneSchedule(entries=[
        ScheduleEntry(layer=i, matrix=m, rank=r, param_delta=0)
        for i in range(3) for m in ("gate", "up", "down")])
    pruned, _ = prune_svd(model, sched)
    rel = abs(perplexity(pruned, stream, proto).ppl - base) / base

    empty, _ = prune_svd(model, PruneSchedule(entries=[]))
    bit_exact = serialize_checkpoint(empty) == serialize_checkpoint(model)
    elapsed = time.time() - t0
    _detail("criterion 4",
            f"full-rank schedule PPL shift {rel:.2e} (<0.1%), empty schedule "
            f"bit-exact={bit_exact}, {elapsed:.0f}s")
    assert rel < 1e-3
    assert bit_exact
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# directional pattern checks on the experiment


def test_criterion_05_collapse_pattern(experiment):
    arms = experiment["arms"].values()
    rhos = [a["collapse_rho"] for a in arms]
    ratios = [a["collapse_ratio"] for a in arms]
    _detail("criterion 5",
            f"dense pruned at rho={[f'{r:.3f}' for r in rhos]}: PPL ratio "
            f"{[f'{x:.2f}' for x in ratios]}, mean {_mean(ratios):.2f} "
            f"(>=2x)")
    assert all(0.28 <= r <= 0.37 for r in rhos)
    assert _mean(ratios) >= 2.0


def test_criterion_06_recovery_pattern(experiment):
    rows = _stage_rows(experiment, "round1_svd")
    pre = _mean(r["pre_kd_ppl"] for r in rows)
    post = _mean(r["post_kd_ppl"] for r in rows)
    dkd = _mean(r["dense_kd_ppl"] for r in rows)
    _detail("criterion 6",
            f"rho~0.15: post/pre {post / pre:.3f} (<=0.6), post/dense_kd "
            f"{post / dkd:.3f} (<=1.25)")
    assert post <= 0.6 * pre
    assert post <= 1.25 * dkd


def test_criterion_07_dense_kd_control(experiment):
    rows = _stage_rows(experiment, "dense_kd_control")
    ratios = [r["post_kd_ppl"] / r["dense_baseline_ppl"] for r in rows]
    _detail("criterion 7",
            f"dense_kd/dense per seed {[f'{x:.3f}' for x in ratios]}, mean "
            f"{_mean(ratios):.3f} (<1)")
    assert _mean(ratios) < 1.0


def test_criterion_08_monotonic_tradeoff(experiment):
    lo = _mean(r["post_kd_ppl"] for r in _stage_rows(experiment, "round1_svd"))
    hi = _mean(r["post_kd_ppl"] for r in _stage_rows(experiment, "round3_svd"))
    _detail("criterion 8",
            f"3-seed mean post-KD PPL: rho~0.15 {lo:.3f} < rho~0.55 {hi:.3f}")
    assert hi > lo


def test_criterion_09_multi_seed_reproducibility(experiment):
    covs = {row["stage"]: row["cov"] for row in experiment["aggregate"]
            if row["stage"].startswith("round")}
    _detail("criterion 9",
            "post-KD CoV per round "
            + str({k: f"{v:.3f}" for k, v in sorted(covs.items())})
            + " (<0.10)")
    assert covs
    assert all(v < 0.10 for v in covs.values())


def test_criterion_10_unstructured_recovery(experiment):
    arms = experiment["arms"].values()
    pre = [a["wanda_pre_ratio"] for a in arms]
    post = [a["wanda_post_ratio"] for a in arms]
    _detail("criterion 10",
            f"50% unstructured prune: pre/dense {[f'{x:.2f}' for x in pre]} "
            f"mean {_mean(pre):.2f} (>=5), post/dense "
            f"{[f'{x:.2f}' for x in post]} mean {_mean(post):.2f} (<=1.5)")
    assert _mean(post) <= 1.5
    assert _mean(pre) >= 5.0


def test_criterion_11_teacher_swap_direction(experiment):
    orig = _mean(r["post_kd_ppl"]
                 for r in _stage_rows(experiment, "round3_svd"))
    swap = _mean(a["swap_post_ppl"] for a in experiment["arms"].values())
    _detail("criterion 11",
            f"rho~0.55 post-KD mean: improved teacher {swap:.3f} <= original "
            f"teacher {orig:.3f}")
    assert swap <= orig


# ---------------------------------------------------------------------------
# profiling, speedup model, formats, budgets


def test_criterion_12_profiling_invariants():
    cfg = ModelConfig(n_layers=4, d_model=256, n_heads=4, d_ff=1024,
                      max_context=128, seed=15)
    dense = new_model(cfg)
    rng = np.random.default_rng(16)
    factored = dense.copy()
    r = 64
    for key in factored.mlp_keys():
        w = factored.tensors[key]
        factored.tensors[key] = FactoredLinear(
            rng.normal(0, 0.02, (w.shape[0], r)).astype(np.float32),
            rng.normal(0, 0.02, (r, w.shape[1])).astype(np.float32), r)
    rho = 1.0 - param_count(factored)["mlp"] / param_count(dense)["mlp"]

    # interleave several profiles per model and keep the per-component
    # minimum: the least noise-contaminated estimate of each phase's cost
    runs_d, runs_f = [], []
    for _ in range(4):
        runs_d.append(profile(dense, batch_size=8, seq_len=64, repeats=5,
                              seed=0))
        runs_f.append(profile(factored, batch_size=8, seq_len=64, repeats=5,
                              seed=0))
    attn_d = min(p.attention_ms for p in runs_d)
    attn_f = min(p.attention_ms for p in runs_f)
    ffn_d = min(p.ffn_ms for p in runs_d)
    ffn_f = min(p.ffn_ms for p in runs_f)
    attn_shift = abs(attn_f - attn_d) / attn_d
    sums = [sum(p.fractions.values()) for p in (runs_d[0], runs_f[0])]
    _detail("criterion 12",
            f"rho={rho:.2f}: attention shift {attn_shift:.1%} (<=15%), ffn "
            f"{ffn_d:.1f}ms -> {ffn_f:.1f}ms (strictly lower), "
            f"fraction sums {sums}")
    assert rho >= 0.5
    assert attn_shift <= 0.15
    assert ffn_f < ffn_d
    assert all(abs(s - 1.0) <= 1e-6 for s in sums)


def test_criterion_13_amdahl_closed_form():
    cases = [
        ((1.0, 0.35), 1.0),
        ((0.0, 0.35), 1.0 / 0.35),
        ((0.16, 0.35), 2.2026431718061674),
    ]
    worst = max(abs(amdahl_max_speedup(*args) - want)
                for args, want in cases)
    _detail("criterion 13",
            f"hand values (f=1; f=0; f=0.16,s=0.35): worst err {worst:.1e} "
            f"(<=1e-12)")
    assert worst <= 1e-12


def test_criterion_14_format_round_trips():
    rng = np.random.default_rng(17)
    ok = 0
    for i in range(20):
        cfg = ModelConfig(
            n_layers=int(rng.integers(1, 4)),
            d_model=int(rng.integers(1, 5)) * 8,
            n_heads=int(rng.choice([1, 2, 4])),
            d_ff=int(rng.integers(1, 5)) * 8,
            max_context=int(rng.integers(2, 5)) * 16,
            seed=int(rng.integers(1 << 30)))
        model = new_model(cfg)
        if i % 2:
            key = f"layers.0.mlp.{['gate', 'up', 'down'][i % 3]}"
            w = model.tensors[key]
            r = int(rng.integers(1, min(w.shape) + 1))
            model.tensors[key] = FactoredLinear(
                rng.normal(size=(w.shape[0], r)).astype(np.float32),
                rng.normal(size=(r, w.shape[1])).astype(np.float32), r)
        blob = serialize_checkpoint(model)
        assert serialize_checkpoint(deserialize_checkpoint(blob)) == blob

        n_seq, k, seq_len = (int(rng.integers(1, 6)), int(rng.integers(1, 9)),
                             int(rng.integers(2, 18)))
        ids = np.stack([
            np.stack([rng.choice(256, size=k, replace=False)
                      for _ in range(seq_len - 1)])
            for _ in range(n_seq)]).astype(np.int64)
        probs = np.sort(rng.uniform(0.0, 1.0 / (k + 1), (n_seq, seq_len - 1, k))
                        .astype(np.float32), axis=2)[..., ::-1].copy()
        cache = ProbabilityCache(
            k=k, vocab=256, seq_len=seq_len, teacher_hash="ab" * 32,
            ids=ids, probs=probs,
            residual=(1.0 - probs.sum(axis=2)).astype(np.float32))
        cblob = serialize_cache(cache)
        assert serialize_cache(deserialize_cache(cblob)) == cblob
        ok += 1
    _detail("criterion 14", f"{ok}/20 checkpoint+cache round-trips "
            "byte-identical")
    assert ok == 20


def test_criterion_15_end_to_end_budget(experiment):
    full = experiment["full_minutes"]
    smoke = experiment["smoke_minutes"]
    _detail("criterion 15",
            f"full 3-round 3-seed pipeline {full:.1f} min (<90), single-seed "
            f"smoke {smoke:.1f} min (<15)")
    assert full < 90.0
    assert smoke < 15.0
