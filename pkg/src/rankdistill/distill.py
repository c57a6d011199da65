"""Frozen-teacher probability caching and offline distillation.

The teacher's top-k output probabilities (plus one aggregated tail bucket)
are cached per calibration position before any structural change. The student
is then trained against that frozen cache with a temperature-scaled KL term
plus cross-entropy on the ground-truth bytes.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CacheMismatch,
    CorruptCache,
    InsufficientData,
    InvalidK,
    NumericalFailure,
)
from .model import Checkpoint, _softmax, checkpoint_hash, forward_batch
from .train import (
    Adam,
    TrainHistory,
    backward_batch,
    clip_gradients,
    quick_ppl,
)

CACHE_MAGIC = b"SKDC"
CACHE_VERSION = 1
KL_EPS = 1e-9


@dataclass
class KDConfig:
    alpha: float = 0.5
    temperature: float = 2.0
    learning_rate: float = 3e-5
    clip_norm: float = 1.0
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 3
    min_delta: float = 0.005   # relative val-PPL improvement over last 3 evals
    seed: int = 0
    batch_size: int = 8

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise CacheMismatch(f"alpha {self.alpha} outside [0, 1]")
        if self.temperature <= 0:
            raise CacheMismatch("temperature must be positive")


@dataclass
class ProbabilityCache:
    k: int
    vocab: int
    seq_len: int
    teacher_hash: str               # hex sha256 of the teacher checkpoint
    ids: np.ndarray                 # (n_seq, n_pos, k) int64, per-position distinct
    probs: np.ndarray               # (n_seq, n_pos, k) float32, descending
    residual: np.ndarray            # (n_seq, n_pos) float32, >= 0
    format_version: int = CACHE_VERSION

    @property
    def n_sequences(self):
        return self.ids.shape[0]

    @property
    def n_positions(self):
        return self.ids.shape[1]


def segment_corpus(corpus, seq_len, max_sequences=None) -> np.ndarray:
    """Exact non-overlapping seq_len windows from the start of the stream."""
    if isinstance(corpus, np.ndarray):
        data = corpus.astype(np.int64)
    else:
        data = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    n = len(data) // seq_len
    if max_sequences is not None:
        n = min(n, max_sequences)
    if n < 1:
        raise InsufficientData("corpus shorter than one cache window")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len)[None, :]
    return data[idx]


def build_cache(teacher: Checkpoint, corpus, k=32, seq_len=64,
                max_sequences=None, batch=32) -> ProbabilityCache:
    """Run the frozen teacher over the calibration segmentation and keep the
    top-k next-byte probabilities per position."""
    if k > teacher.config.vocab:
        raise InvalidK(f"k={k} exceeds vocab {teacher.config.vocab}")
    if k < 1:
        raise InvalidK("k must be positive")
    wins = segment_corpus(corpus, seq_len, max_sequences)
    n_seq = wins.shape[0]
    n_pos = seq_len - 1
    ids = np.empty((n_seq, n_pos, k), dtype=np.int64)
    probs = np.empty((n_seq, n_pos, k), dtype=np.float32)
    for lo in range(0, n_seq, batch):
        chunk = wins[lo: lo + batch]
        logits, _ = forward_batch(teacher, chunk[:, :-1])
        p = _softmax(logits.astype(np.float64))
        top = np.argpartition(-p, k - 1, axis=2)[:, :, :k]
        tp = np.take_along_axis(p, top, axis=2)
        order = np.argsort(-tp, axis=2, kind="stable")
        ids[lo: lo + batch] = np.take_along_axis(top, order, axis=2)
        probs[lo: lo + batch] = np.take_along_axis(tp, order, axis=2)
    residual = np.maximum(1.0 - probs.astype(np.float64).sum(axis=2), 0.0)
    return ProbabilityCache(
        k=k, vocab=teacher.config.vocab, seq_len=seq_len,
        teacher_hash=checkpoint_hash(teacher),
        ids=ids, probs=probs, residual=residual.astype(np.float32),
    )


def soften(probs, residual, temperature: float):
    """Power-transform bucket masses (p -> p^(1/T)) and renormalize.

    Works on the top-k masses plus the single tail bucket; zero masses stay
    zero and the ordering of masses is preserved.
    """
    masses = np.append(np.asarray(probs, dtype=np.float64), residual)
    out = np.zeros_like(masses)
    pos = masses > 0
    out[pos] = masses[pos] ** (1.0 / temperature)
    out /= out.sum()
    return out[:-1], out[-1]


def kd_loss(student_probs, ids, cached_probs, residual, target,
            cfg: KDConfig) -> float:
    """Single-position KD objective: alpha*T^2*KL(teacher || student buckets)
    + (1-alpha)*CE on the ground-truth byte."""
    cfg.validate()
    ids = np.asarray(ids, dtype=np.int64)
    cached_probs = np.asarray(cached_probs, dtype=np.float64)
    if (ids.ndim != 1 or cached_probs.shape != ids.shape
            or len(set(ids.tolist())) != len(ids)
            or np.any(cached_probs < 0) or residual < -1e-6):
        raise CorruptCache("malformed cache entry")
    sp = np.asarray(student_probs, dtype=np.float64)
    s_top = sp[ids]
    s_tail = max(1.0 - float(s_top.sum()), 0.0)
    t_soft_top, t_soft_tail = soften(cached_probs, max(residual, 0.0),
                                     cfg.temperature)
    s_soft_top, s_soft_tail = soften(s_top, s_tail, cfg.temperature)
    t_all = np.concatenate([t_soft_top, [t_soft_tail]])
    s_all = np.concatenate([s_soft_top, [s_soft_tail]])
    kl = float(np.sum(
        np.where(t_all > 0,
                 t_all * (np.log(np.maximum(t_all, KL_EPS))
                          - np.log(np.maximum(s_all, KL_EPS))),
                 0.0)
    ))
    ce = -float(np.log(max(sp[int(target)], KL_EPS)))
    return (cfg.alpha * cfg.temperature ** 2 * kl
            + (1.0 - cfg.alpha) * ce)


def kd_loss_and_dlogits(logits, ids, cached_probs, residual, targets,
                        cfg: KDConfig):
    """Batched KD objective over (B, T, V) logits.

    Returns (mean loss, dloss/dlogits). The KL is over k+1 buckets: the
    teacher's top-k token ids plus one aggregated tail bucket on each side.
    """
    cfg.validate()
    B, T, V = logits.shape
    n = B * T
    invT = 1.0 / cfg.temperature

    p = _softmax(logits.astype(np.float64))
    s_top = np.take_along_axis(p, ids, axis=2)
    s_tail = np.maximum(1.0 - s_top.sum(axis=2), 0.0)

    # soften both sides over k+1 buckets
    tp = cached_probs.astype(np.float64)
    tr = np.maximum(residual.astype(np.float64), 0.0)
    t_pow = np.where(tp > 0, np.maximum(tp, 0.0) ** invT, 0.0)
    tr_pow = np.where(tr > 0, tr ** invT, 0.0)
    t_z = t_pow.sum(axis=2) + tr_pow
    t_soft = t_pow / t_z[:, :, None]
    t_soft_tail = tr_pow / t_z

    s_top_c = np.maximum(s_top, KL_EPS)
    s_tail_c = np.maximum(s_tail, KL_EPS)
    s_pow = s_top_c ** invT
    st_pow = s_tail_c ** invT
    s_z = s_pow.sum(axis=2) + st_pow
    s_soft = s_pow / s_z[:, :, None]
    s_soft_tail = st_pow / s_z

    kl = (
        np.where(t_soft > 0,
                 t_soft * (np.log(np.maximum(t_soft, KL_EPS))
                           - np.log(np.maximum(s_soft, KL_EPS))),
                 0.0).sum(axis=2)
        + np.where(t_soft_tail > 0,
                   t_soft_tail * (np.log(np.maximum(t_soft_tail, KL_EPS))
                                  - np.log(np.maximum(s_soft_tail, KL_EPS))),
                   0.0)
    )

    tgt_flat = targets.reshape(n)
    p_flat = p.reshape(n, V)
    p_tgt = np.maximum(p_flat[np.arange(n), tgt_flat], KL_EPS)
    ce = -np.log(p_tgt).reshape(B, T)

    loss = float((cfg.alpha * cfg.temperature ** 2 * kl
                  + (1.0 - cfg.alpha) * ce).mean())
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite distillation loss")

    # d(alpha*T^2*KL)/d(bucket mass m) = -alpha*T*(t_soft - s_soft)/m
    coef = -cfg.alpha * cfg.temperature / n
    g_top = coef * (t_soft - s_soft) / s_top_c
    g_tail = coef * (t_soft_tail - s_soft_tail) / s_tail_c

    # chain through softmax: dz_i = p_i * (g_i - sum_j p_j g_j), where g_i is
    # the gradient wrt the bucket containing vocab index i
    dot = (g_top * s_top).sum(axis=2) + g_tail * s_tail
    dlogits = p * (g_tail[:, :, None] - dot[:, :, None])
    top_vals = np.take_along_axis(p, ids, axis=2) * (g_top - dot[:, :, None])
    np.put_along_axis(dlogits, ids, top_vals, axis=2)

    dce = p_flat.copy()
    dce[np.arange(n), tgt_flat] -= 1.0
    dlogits += (1.0 - cfg.alpha) / n * dce.reshape(B, T, V)
    return loss, dlogits.astype(logits.dtype), float(kl.mean())


# --- serialization ---
#
# Layout (little-endian): magic "SKDC" | version u32 | k u32 | vocab u32 |
# seq_len u32 | n_sequences u32 | teacher_hash (32 raw bytes) | per sequence:
# n_positions u32, then per position k x (token_id u32, prob f32), residual f32.


def serialize_cache(cache: ProbabilityCache) -> bytes:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<5I", cache.format_version, cache.k, cache.vocab,
                          cache.seq_len, cache.n_sequences))
    buf.write(bytes.fromhex(cache.teacher_hash))
    n_pos, k = cache.n_positions, cache.k
    for s in range(cache.n_sequences):
        buf.write(struct.pack("<I", n_pos))
        inter = np.empty((n_pos, 2 * k + 1), dtype="<u4")
        inter[:, 0:2 * k:2] = cache.ids[s].astype("<u4")
        inter[:, 1:2 * k:2] = cache.probs[s].astype("<f4").view("<u4")
        inter[:, 2 * k] = cache.residual[s].astype("<f4").view("<u4")
        buf.write(inter.tobytes())
    return buf.getvalue()


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CorruptCache("unexpected end of cache file")
    return data


def deserialize_cache(data: bytes) -> ProbabilityCache:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != CACHE_MAGIC:
        raise CorruptCache("bad magic")
    version, k, vocab, seq_len, n_seq = struct.unpack("<5I", _read_exact(buf, 20))
    if version != CACHE_VERSION:
        raise CorruptCache(f"unsupported cache version {version}")
    if not (1 <= k <= vocab):
        raise CorruptCache(f"implausible k={k}")
    teacher_hash = _read_exact(buf, 32).hex()
    ids = np.empty((n_seq, seq_len - 1, k), dtype=np.int64)
    probs = np.empty((n_seq, seq_len - 1, k), dtype=np.float32)
    residual = np.empty((n_seq, seq_len - 1), dtype=np.float32)
    for s in range(n_seq):
        (n_pos,) = struct.unpack("<I", _read_exact(buf, 4))
        if n_pos != seq_len - 1:
            raise CorruptCache(f"sequence {s}: bad position count {n_pos}")
        raw = np.frombuffer(_read_exact(buf, 4 * n_pos * (2 * k + 1)),
                            dtype="<u4").reshape(n_pos, 2 * k + 1)
        ids[s] = raw[:, 0:2 * k:2]
        probs[s] = raw[:, 1:2 * k:2].view("<f4")
        residual[s] = raw[:, 2 * k].view("<f4")
    if buf.read(1):
        raise CorruptCache("trailing bytes after last sequence")
    if np.any(ids >= vocab) or np.any(probs < 0) or np.any(probs > 1):
        raise CorruptCache("cache probabilities out of range")
    return ProbabilityCache(
        k=k, vocab=vocab, seq_len=seq_len, teacher_hash=teacher_hash,
        ids=ids, probs=probs, residual=residual, format_version=version,
    )


def save_cache(cache: ProbabilityCache, path):
    with open(path, "wb") as f:
        f.write(serialize_cache(cache))


def load_cache(path) -> ProbabilityCache:
    with open(path, "rb") as f:
        return deserialize_cache(f.read())


def distill(student: Checkpoint, cache: ProbabilityCache, corpus, validation,
            cfg: KDConfig, zero_masks: dict | None = None):
    """Train the student against the frozen cache.

    Stops on validation-PPL regression past its minimum (patience), on
    saturation (improvement below min_delta over the last 3 evals), or at
    max_steps; returns the best-validation checkpoint and the history.
    zero_masks, when given, re-zeroes masked MLP weights after every step so
    an unstructured sparsity pattern survives recovery.
    """
    cfg.validate()
    wins = segment_corpus(corpus, cache.seq_len)
    if wins.shape[0] < cache.n_sequences:
        raise CacheMismatch(
            f"corpus yields {wins.shape[0]} windows, cache has "
            f"{cache.n_sequences}"
        )
    wins = wins[: cache.n_sequences]
    if isinstance(validation, np.ndarray):
        val = validation.astype(np.int64)
    else:
        val = np.frombuffer(bytes(validation), dtype=np.uint8).astype(np.int64)

    student = student.copy()
    _apply_masks(student, zero_masks)
    opt = Adam(student, lr=cfg.learning_rate)
    history = TrainHistory()
    val_len = min(cache.seq_len - 1, student.config.max_context)
    best_ppl = quick_ppl(student, val, val_len)
    best = student.copy()
    history.append(0, float("nan"), best_ppl)
    evals = [best_ppl]
    evals_since_best = 0

    for step in range(1, cfg.max_steps + 1):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, step])
        pick = rng.integers(0, cache.n_sequences, size=cfg.batch_size)
        batch = wins[pick]
        inputs, targets = batch[:, :-1], batch[:, 1:]
        logits, acts = forward_batch(student, inputs)
        loss, dlogits, _ = kd_loss_and_dlogits(
            logits, cache.ids[pick], cache.probs[pick], cache.residual[pick],
            targets, cfg,
        )
        grads = backward_batch(student, acts, dlogits)
        clip_gradients(grads, cfg.clip_norm)
        opt.step(student, grads)
        _apply_masks(student, zero_masks)

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val_ppl = quick_ppl(student, val, val_len)
            history.append(step, loss, val_ppl)
            if val_ppl < best_ppl:
                best_ppl = val_ppl
                best = student.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
            evals.append(val_ppl)
            if evals_since_best >= cfg.patience:
                break
            if len(evals) >= 4:
                ref = evals[-4]
                if (ref - min(evals[-3:])) / ref < cfg.min_delta:
                    break
    return best, history


def _apply_masks(student, zero_masks):
    if not zero_masks:
        return
    for key, mask in zero_masks.items():
        w = student.tensors[key]
        w *= mask.astype(w.dtype)
