"""Structured low-rank pruning with tiered rank schedules, plus an
unstructured magnitude-times-activation-norm backend.

Only MLP projection matrices are ever touched; attention and embeddings are
left bit-identical.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InsufficientData,
    InvalidSparsity,
    ScheduleMismatch,
    UnreachableTarget,
)
from .linalg import FactoredLinear, rank_for_energy, svd, truncate
from .model import MLP_NAMES, Checkpoint, forward_batch, param_count

_TAU_FLOOR = 1e-9


@dataclass
class TierSpec:
    protected_head: int = 1
    protected_tail: int = 1
    tau_protected: float = 0.99
    tau_middle: float = 0.95
    per_matrix_scale: dict = field(
        default_factory=lambda: {"gate": 1.0, "up": 0.98, "down": 0.98}
    )

    def validate(self, n_layers: int):
        for tau in (self.tau_protected, self.tau_middle):
            if not (0.0 < tau <= 1.0):
                raise ScheduleMismatch(f"tau {tau} outside (0, 1]")
        if self.tau_protected < self.tau_middle:
            raise ScheduleMismatch("tau_protected must be >= tau_middle")
        if self.protected_head + self.protected_tail >= n_layers:
            raise ScheduleMismatch("protected layers cover the whole stack")

    def effective_tau(self, layer, matrix, n_layers, scale=1.0) -> float:
        protected = (layer < self.protected_head
                     or layer >= n_layers - self.protected_tail)
        tau = self.tau_protected if protected else self.tau_middle
        tau *= self.per_matrix_scale.get(matrix, 1.0) * scale
        return min(max(tau, _TAU_FLOOR), 1.0)


@dataclass
class ScheduleEntry:
    layer: int
    matrix: str
    rank: int
    param_delta: int


@dataclass
class PruneSchedule:
    entries: list

    def to_json(self, path=None):
        payload = json.dumps(
            [vars(e) for e in self.entries], indent=2, sort_keys=True
        )
        if path is not None:
            with open(path, "w") as f:
                f.write(payload)
        return payload

    @classmethod
    def from_json(cls, text):
        return cls(entries=[ScheduleEntry(**d) for d in json.loads(text)])


@dataclass
class PruneReport:
    method: str
    mlp_params_before: int
    mlp_params_after: int
    rho: float
    entry_errors: dict = field(default_factory=dict)

    def to_json(self, path=None):
        payload = json.dumps(vars(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(payload)
        return payload


def _current_weight(model, layer, matrix):
    w = model.tensors[f"layers.{layer}.mlp.{matrix}"]
    if isinstance(w, FactoredLinear):
        return w.materialize(), w.param_count()
    return w, w.size


def _schedule_for_scale(model, tiers, scale, svds):
    c = model.config
    entries = []
    for layer in range(c.n_layers):
        for matrix in MLP_NAMES:
            key = f"layers.{layer}.mlp.{matrix}"
            w, cur_params = _current_weight(model, layer, matrix)
            if key not in svds:
                svds[key] = svd(w.astype(np.float64))
            sigma = svds[key].sigma
            tau = tiers.effective_tau(layer, matrix, c.n_layers, scale)
            r = rank_for_energy(sigma, tau)
            new_params = r * (w.shape[0] + w.shape[1])
            if new_params >= cur_params:
                continue
            entries.append(ScheduleEntry(
                layer=layer, matrix=matrix, rank=r,
                param_delta=cur_params - new_params,
            ))
    return PruneSchedule(entries=entries)


def build_schedule(model: Checkpoint, tiers: TierSpec,
                   target_rho: float | None = None,
                   svds: dict | None = None) -> PruneSchedule:
    """Per-matrix target ranks from tiered energy thresholds.

    With target_rho, thresholds are scaled down by bisection until the
    schedule's parameter reduction lands within +/-0.02 of the target.
    Entries that would not compress are dropped.
    """
    tiers.validate(model.config.n_layers)
    if svds is None:
        svds = {}
    before = param_count(model)["mlp"]

    def rho_of(schedule):
        return sum(e.param_delta for e in schedule.entries) / before

    if target_rho is None:
        return _schedule_for_scale(model, tiers, 1.0, svds)

    lo, hi = _TAU_FLOOR, 1.0
    best = _schedule_for_scale(model, tiers, lo, svds)
    if rho_of(best) < target_rho - 0.02:
        raise UnreachableTarget(
            f"max reachable rho {rho_of(best):.3f} below target {target_rho}"
        )
    # scales above 1 saturate thresholds at 1.0, shedding entries until the
    # schedule is empty, so low targets (including 0) stay reachable
    while rho_of(_schedule_for_scale(model, tiers, hi, svds)) \
            > target_rho + 0.02 and hi < 1e12:
        hi *= 4.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        sched = _schedule_for_scale(model, tiers, mid, svds)
        rho = rho_of(sched)
        if abs(rho - target_rho) <= 0.02:
            return sched
        if rho > target_rho:
            lo = mid
        else:
            hi = mid
    sched = _schedule_for_scale(model, tiers, lo, svds)
    if abs(rho_of(sched) - target_rho) > 0.02:
        raise UnreachableTarget(
            f"bisection failed to land within 0.02 of rho={target_rho}"
        )
    return sched


def prune_svd(model: Checkpoint, schedule: PruneSchedule,
              svds: dict | None = None):
    """Replace scheduled MLP matrices with truncated factorizations."""
    if svds is None:
        svds = {}
    out = model.copy()
    before = param_count(model)["mlp"]
    errors = {}
    for e in schedule.entries:
        key = f"layers.{e.layer}.mlp.{e.matrix}"
        if key not in model.tensors:
            raise ScheduleMismatch(f"no such matrix: {key}")
        w, _ = _current_weight(model, e.layer, e.matrix)
        if not (1 <= e.rank <= min(w.shape)):
            raise ScheduleMismatch(f"{key}: rank {e.rank} out of range")
        if key not in svds:
            svds[key] = svd(w.astype(np.float64))
        fac = truncate(svds[key], e.rank)
        out.tensors[key] = FactoredLinear(
            a=fac.a.astype(model.dtype), b=fac.b.astype(model.dtype), r=fac.r
        )
        resid = np.linalg.norm(w - fac.materialize())
        errors[key] = float(resid / max(np.linalg.norm(w), 1e-30))
    after = param_count(out)["mlp"]
    report = PruneReport(
        method="svd",
        mlp_params_before=before,
        mlp_params_after=after,
        rho=1.0 - after / before,
        entry_errors=errors,
    )
    return out, report


def collect_activation_norms(model: Checkpoint, calibration, n_samples: int,
                             seq_len: int = 64) -> dict:
    """Per-input-feature L2 activation norms for every MLP matrix.

    Windows are taken sequentially from the start of the calibration stream,
    so results are deterministic for a fixed stream.
    """
    if isinstance(calibration, np.ndarray):
        data = calibration.astype(np.int64)
    else:
        data = np.frombuffer(bytes(calibration), dtype=np.uint8).astype(np.int64)
    n_win = min(n_samples, len(data) // seq_len)
    if n_win < 1:
        raise InsufficientData("calibration stream shorter than one window")

    c = model.config
    sq_in = [np.zeros(c.d_model, dtype=np.float64) for _ in range(c.n_layers)]
    sq_mid = [np.zeros(c.d_ff, dtype=np.float64) for _ in range(c.n_layers)]
    idx = np.arange(n_win)[:, None] * seq_len + np.arange(seq_len)[None, :]
    wins = data[idx]
    for lo in range(0, n_win, 32):
        chunk = wins[lo: lo + 32]
        _, acts = forward_batch(model, chunk, capture_hidden=True)
        for i in range(c.n_layers):
            h = acts["mlp_in"][i].astype(np.float64)
            m = acts["mlp_mid"][i].astype(np.float64)
            sq_in[i] += (h * h).sum(axis=(0, 1))
            sq_mid[i] += (m * m).sum(axis=(0, 1))
    norms = {}
    for i in range(c.n_layers):
        norms[f"layers.{i}.mlp.gate"] = np.sqrt(sq_in[i])
        norms[f"layers.{i}.mlp.up"] = np.sqrt(sq_in[i])
        norms[f"layers.{i}.mlp.down"] = np.sqrt(sq_mid[i])
    return norms


def prune_wanda(model: Checkpoint, norms: dict, sparsity: float):
    """Zero the lowest-scoring fraction of weights per output neuron.

    Score is |W_ij| * input-activation-norm_j; matrices stay dense with
    explicit zeros. Ties break toward the lower input index.
    """
    if not (0.0 < sparsity < 1.0):
        raise InvalidSparsity(f"sparsity {sparsity} outside (0, 1)")
    out = model.copy()
    before = param_count(model)["mlp"]
    zeroed = 0
    for key in model.mlp_keys():
        w = out.tensors[key]
        if isinstance(w, FactoredLinear):
            raise ScheduleMismatch(f"{key} is factored; WANDA needs dense")
        if key not in norms:
            raise ScheduleMismatch(f"missing activation norms for {key}")
        n_in = w.shape[0]
        k = int(sparsity * n_in)
        if k == 0:
            continue
        scores = np.abs(w) * norms[key].astype(w.dtype)[:, None]
        order = np.argsort(scores, axis=0, kind="stable")
        rows = order[:k, :]
        cols = np.broadcast_to(np.arange(w.shape[1]), rows.shape)
        w[rows, cols] = 0.0
        zeroed += rows.size
    report = PruneReport(
        method="wanda",
        mlp_params_before=before,
        mlp_params_after=before - zeroed,
        rho=zeroed / before,
        entry_errors={},
    )
    return out, report


def wanda_zero_masks(model: Checkpoint) -> dict:
    """Boolean keep-masks for each dense MLP matrix (False where zeroed).

    Applied after each optimizer step during recovery training so the
    unstructured sparsity pattern survives distillation.
    """
    masks = {}
    for key in model.mlp_keys():
        w = model.tensors[key]
        if not isinstance(w, FactoredLinear):
            masks[key] = w != 0.0
    return masks
