"""Sliding-window perplexity evaluation.

Overlapping windows double-score shared positions by default (50%-overlap
protocol); a "fresh" mode scores each token at most once for sensitivity
analysis.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientData
from .model import Checkpoint, _softmax, forward_batch


@dataclass
class EvalProtocol:
    context_len: int = 128
    stride: int = 64
    include_final_partial: bool = True
    score_mode: str = "all"   # "all" double-scores overlaps; "fresh" does not

    def validate(self):
        if self.stride < 1 or self.stride > self.context_len:
            raise InsufficientData(
                f"stride {self.stride} must be in [1, context_len]"
            )
        if self.score_mode not in ("all", "fresh"):
            raise InsufficientData(f"unknown score_mode {self.score_mode!r}")


@dataclass
class EvalResult:
    ppl: float
    token_count: int
    mean_nll: float
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def to_dict(self):
        return {
            "ppl": self.ppl,
            "token_count": self.token_count,
            "mean_nll": self.mean_nll,
            "context_len": self.protocol.context_len,
            "stride": self.protocol.stride,
        }


def windows(n_tokens: int, protocol: EvalProtocol):
    """Window (start, end) pairs: full windows stride apart, optionally one
    trailing partial window reaching n_tokens."""
    protocol.validate()
    if n_tokens < 2:
        raise InsufficientData("need at least 2 tokens")
    ctx, stride = protocol.context_len, protocol.stride
    spans = []
    start = 0
    while start + ctx <= n_tokens:
        spans.append((start, start + ctx))
        start += stride
    if protocol.include_final_partial:
        covered = spans[-1][1] if spans else 0
        if covered < n_tokens and start < n_tokens:
            spans.append((start, n_tokens))
    return spans


def _window_nll(model, toks, score_from):
    """Sum of NLLs for targets at in-window indices >= score_from."""
    logits, _ = forward_batch(model, toks[None, :-1])
    probs = _softmax(logits[0].astype(np.float64))
    tgt = toks[1:]
    p = probs[np.arange(len(tgt)), tgt]
    nll = -np.log(np.maximum(p, 1e-30))
    # target index i predicts window position i+1
    keep = np.arange(1, len(toks)) >= score_from
    return float(nll[keep].sum()), int(keep.sum())


def perplexity(model: Checkpoint, tokens, protocol: EvalProtocol | None = None,
               batch=64) -> EvalResult:
    """Sliding-window perplexity over a byte stream."""
    if protocol is None:
        protocol = EvalProtocol()
    if isinstance(tokens, np.ndarray):
        data = tokens.astype(np.int64)
    else:
        data = np.frombuffer(bytes(tokens), dtype=np.uint8).astype(np.int64)
    spans = windows(len(data), protocol)

    total_nll = 0.0
    total_tok = 0
    full = [s for s in spans if s[1] - s[0] == protocol.context_len]
    partial = [s for s in spans if s[1] - s[0] != protocol.context_len]

    if protocol.score_mode == "all":
        if full:
            ctx = protocol.context_len
            mat = np.stack([data[s:e] for s, e in full])
            for lo in range(0, len(mat), batch):
                chunk = mat[lo: lo + batch]
                logits, _ = forward_batch(model, chunk[:, :-1])
                probs = _softmax(logits.astype(np.float64))
                tgt = chunk[:, 1:]
                p = np.take_along_axis(probs, tgt[:, :, None], axis=2)[:, :, 0]
                total_nll += float(-np.log(np.maximum(p, 1e-30)).sum())
                total_tok += tgt.size
        for s, e in partial:
            if e - s < 2:
                continue
            nll, n = _window_nll(model, data[s:e], 1)
            total_nll += nll
            total_tok += n
    else:
        prev_end = 0
        for s, e in spans:
            if e - s < 2:
                prev_end = max(prev_end, e)
                continue
            score_from = max(1, prev_end - s)
            if score_from < e - s:
                nll, n = _window_nll(model, data[s:e], score_from)
                total_nll += nll
                total_tok += n
            prev_end = e

    if total_tok == 0:
        raise InsufficientData("no scorable positions under this protocol")
    mean_nll = total_nll / total_tok
    return EvalResult(
        ppl=float(np.exp(mean_nll)),
        token_count=total_tok,
        mean_nll=float(mean_nll),
        protocol=protocol,
    )
