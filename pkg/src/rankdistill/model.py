"""Tiny byte-level causal transformer with swappable dense/factored MLP
projections.

The forward pass is written against plain numpy so the training module can
backpropagate through it by hand. A checkpoint is an ordered dict of tensors;
MLP projection entries are either a plain ndarray (dense) or a FactoredLinear
(low-rank a @ b).
"""

import hashlib
import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCheckpoint, InvalidConfig, InvalidSequence
from .linalg import FactoredLinear

CHECKPOINT_MAGIC = b"SKDM"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
MLP_NAMES = ("gate", "up", "down")


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab: int = 256
    max_context: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.vocab != 256:
            raise InvalidConfig("vocab is fixed at 256 (raw bytes)")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_context"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    dtype: type = np.float32
    format_version: int = CHECKPOINT_VERSION

    def mlp_keys(self):
        return [
            f"layers.{i}.mlp.{name}"
            for i in range(self.config.n_layers)
            for name in MLP_NAMES
        ]

    def astype(self, dtype) -> "Checkpoint":
        out = {}
        for k, v in self.tensors.items():
            if isinstance(v, FactoredLinear):
                out[k] = FactoredLinear(
                    v.a.astype(dtype), v.b.astype(dtype), v.r
                )
            else:
                out[k] = v.astype(dtype)
        return Checkpoint(self.config, out, dtype, self.format_version)

    def copy(self) -> "Checkpoint":
        return self.astype(self.dtype)


@dataclass
class ForwardOutput:
    probabilities: np.ndarray            # (T, vocab), rows sum to 1
    logits: np.ndarray                   # (T, vocab)
    hidden_states: list | None = None    # per layer, when capture_hidden


def _tensor_order(config: ModelConfig):
    keys = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        keys += [f"{p}.ln1.g", f"{p}.ln1.b"]
        keys += [f"{p}.attn.{n}" for n in ("wq", "wk", "wv", "wo")]
        keys += [f"{p}.ln2.g", f"{p}.ln2.b"]
        keys += [f"{p}.mlp.{n}" for n in MLP_NAMES]
    keys += ["lnf.g", "lnf.b", "w_out"]
    return keys


def _tensor_shape(key: str, c: ModelConfig):
    if key == "tok_emb":
        return (c.vocab, c.d_model)
    if key == "pos_emb":
        return (c.max_context, c.d_model)
    if key == "w_out":
        return (c.d_model, c.vocab)
    part = key.split(".")
    if part[-2] in ("ln1", "ln2") or part[0] == "lnf":
        return (c.d_model,)
    if part[-2] == "attn":
        return (c.d_model, c.d_model)
    if part[-2] == "mlp":
        if part[-1] == "down":
            return (c.d_ff, c.d_model)
        return (c.d_model, c.d_ff)
    raise KeyError(key)


def new_model(config: ModelConfig, dtype=np.float32) -> Checkpoint:
    """Seeded init: normal(0, 0.02) weights, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for key in _tensor_order(config):
        shape = _tensor_shape(key, config)
        if key.endswith(".g"):
            tensors[key] = np.ones(shape, dtype=dtype)
        elif key.endswith(".b"):
            tensors[key] = np.zeros(shape, dtype=dtype)
        else:
            tensors[key] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return Checkpoint(config=config, tensors=tensors, dtype=dtype)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def _mlp_apply(w, x):
    if isinstance(w, FactoredLinear):
        return (x @ w.a) @ w.b
    return x @ w


class _Timer:
    """Accumulates wall time per forward component."""

    def __init__(self):
        self.attention = 0.0
        self.ffn = 0.0
        self.other = 0.0
        self._t0 = None
        self._total0 = None

    def start(self):
        self._total0 = time.perf_counter()
        self._t0 = self._total0

    def mark(self, bucket):
        t = time.perf_counter()
        setattr(self, bucket, getattr(self, bucket) + (t - self._t0))
        self._t0 = t

    def stop(self):
        self.mark("other")


def forward_batch(model: Checkpoint, tokens: np.ndarray, capture_hidden=False,
                  timer: _Timer | None = None):
    """Batched causal forward pass.

    tokens: (B, T) integer array of byte values. Returns (logits, acts) where
    acts caches every intermediate needed by train.backward_batch. With
    capture_hidden, acts["mlp_in"] / acts["mlp_mid"] hold per-layer MLP input
    activations for calibration.
    """
    c = model.config
    dt = model.dtype
    B, T = tokens.shape
    if timer:
        timer.start()

    x = (model.tensors["tok_emb"][tokens]
         + model.tensors["pos_emb"][:T][None, :, :]).astype(dt)
    mask = np.triu(np.full((T, T), -np.inf, dtype=dt), k=1)
    H = c.n_heads
    dh = c.d_model // H

    acts = {"tokens": tokens, "x0": x, "layers": [],
            "mlp_in": [], "mlp_mid": []}
    for i in range(c.n_layers):
        t = model.tensors
        p = f"layers.{i}"
        if timer:
            timer.mark("other")
        # pre-LN attention
        h1, ln1c = _layernorm_fwd(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        q = h1 @ t[f"{p}.attn.wq"]
        k = h1 @ t[f"{p}.attn.wk"]
        v = h1 @ t[f"{p}.attn.wv"]
        qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh).astype(dt)
        scores = scores + mask
        attn = _softmax(scores)
        ctx = attn @ vh
        ctx2 = ctx.transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
        attn_out = ctx2 @ t[f"{p}.attn.wo"]
        x = x + attn_out
        if timer:
            timer.mark("attention")

        # pre-LN gated MLP
        h2, ln2c = _layernorm_fwd(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        g = _mlp_apply(t[f"{p}.mlp.gate"], h2)
        u = _mlp_apply(t[f"{p}.mlp.up"], h2)
        sg = _silu(g)
        mid = sg * u
        y = _mlp_apply(t[f"{p}.mlp.down"], mid)
        x = x + y
        if timer:
            timer.mark("ffn")

        acts["layers"].append({
            "h1": h1, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
            "attn": attn, "ctx2": ctx2,
            "h2": h2, "ln2c": ln2c, "g": g, "u": u, "sg": sg, "mid": mid,
        })
        if capture_hidden:
            acts["mlp_in"].append(h2)
            acts["mlp_mid"].append(mid)

    hf, lnfc = _layernorm_fwd(x, model.tensors["lnf.g"], model.tensors["lnf.b"])
    logits = hf @ model.tensors["w_out"]
    acts["hf"] = hf
    acts["lnfc"] = lnfc
    if timer:
        timer.stop()
    return logits, acts


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def forward(model: Checkpoint, tokens, capture_hidden=False) -> ForwardOutput:
    """Single-sequence forward pass over raw bytes."""
    arr = np.frombuffer(bytes(tokens), dtype=np.uint8).astype(np.int64)
    if not (1 <= len(arr) <= model.config.max_context):
        raise InvalidSequence(
            f"sequence length {len(arr)} outside [1, {model.config.max_context}]"
        )
    logits, acts = forward_batch(model, arr[None, :], capture_hidden)
    hidden = None
    if capture_hidden:
        hidden = [h[0] for h in acts["mlp_in"]]
    return ForwardOutput(
        probabilities=_softmax(logits[0]),
        logits=logits[0],
        hidden_states=hidden,
    )


def param_count(model: Checkpoint) -> dict:
    """Parameter counts by group; factored MLP entries count r*(m+n)."""
    mlp = 0
    for key in model.mlp_keys():
        w = model.tensors[key]
        mlp += w.param_count() if isinstance(w, FactoredLinear) else w.size
    attention = sum(
        model.tensors[k].size for k in model.tensors
        if ".attn." in k
    )
    embedding = (model.tensors["tok_emb"].size
                 + model.tensors["pos_emb"].size
                 + model.tensors["w_out"].size)
    other = sum(
        v.size for k, v in model.tensors.items()
        if ".ln" in k or k.startswith("lnf")
    )
    return {
        "total": mlp + attention + embedding + other,
        "mlp": mlp,
        "attention": attention,
        "embedding": embedding,
        "other": other,
    }


# --- serialization ---
#
# Layout (all little-endian):
#   magic "SKDM" | version u32 | n_layers, d_model, n_heads, d_ff, vocab,
#   max_context (u32 each) | seed u64 | tensors in _tensor_order().
# Each tensor: tag u8 (0 dense, 1 factored).
#   dense:    ndim u32, dims u32..., payload f32
#   factored: r u32, then A and B each as (ndim u32, dims u32..., payload f32)


def _write_array(buf, arr):
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CorruptCheckpoint("unexpected end of file")
    return data


def _read_array(buf):
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    if ndim > 4:
        raise CorruptCheckpoint(f"implausible tensor rank {ndim}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    if count > 1 << 28:
        raise CorruptCheckpoint("implausible tensor size")
    data = _read_exact(buf, 4 * count)
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def serialize_checkpoint(model: Checkpoint) -> bytes:
    if model.dtype != np.float32:
        raise CorruptCheckpoint("only float32 checkpoints are serializable")
    c = model.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", model.format_version))
    buf.write(struct.pack("<6I", c.n_layers, c.d_model, c.n_heads,
                          c.d_ff, c.vocab, c.max_context))
    buf.write(struct.pack("<Q", c.seed & 0xFFFFFFFFFFFFFFFF))
    for key in _tensor_order(c):
        w = model.tensors[key]
        if isinstance(w, FactoredLinear):
            buf.write(b"\x01")
            buf.write(struct.pack("<I", w.r))
            _write_array(buf, w.a)
            _write_array(buf, w.b)
        else:
            buf.write(b"\x00")
            _write_array(buf, w)
    return buf.getvalue()


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported format version {version}")
    fields = struct.unpack("<6I", _read_exact(buf, 24))
    (seed,) = struct.unpack("<Q", _read_exact(buf, 8))
    config = ModelConfig(*fields, seed=seed)
    config.validate()
    tensors = {}
    for key in _tensor_order(config):
        tag = _read_exact(buf, 1)[0]
        expected = _tensor_shape(key, config)
        if tag == 0:
            arr = _read_array(buf)
            if arr.shape != expected:
                raise CorruptCheckpoint(
                    f"{key}: shape {arr.shape}, expected {expected}"
                )
            tensors[key] = arr
        elif tag == 1:
            (r,) = struct.unpack("<I", _read_exact(buf, 4))
            a = _read_array(buf)
            b = _read_array(buf)
            if (len(expected) != 2 or a.shape != (expected[0], r)
                    or b.shape != (r, expected[1])):
                raise CorruptCheckpoint(f"{key}: bad factored shapes")
            tensors[key] = FactoredLinear(a=a, b=b, r=r)
        else:
            raise CorruptCheckpoint(f"{key}: unknown tensor tag {tag}")
    if buf.read(1):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    return Checkpoint(config=config, tensors=tensors,
                      dtype=np.float32, format_version=version)


def save_checkpoint(model: Checkpoint, path) -> None:
    data = serialize_checkpoint(model)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read())


def checkpoint_hash(model: Checkpoint) -> str:
    return hashlib.sha256(serialize_checkpoint(model)).hexdigest()
