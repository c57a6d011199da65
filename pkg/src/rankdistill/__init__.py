"""Desk-scale lab for low-rank pruning of a tiny byte-level transformer with
self-referential offline distillation."""

from .linalg import (
    FactoredLinear,
    SpectrumDiagnostic,
    SvdResult,
    rank_for_energy,
    spectrum_report,
    svd,
    truncate,
)
from .model import (
    Checkpoint,
    ForwardOutput,
    ModelConfig,
    checkpoint_hash,
    forward,
    load_checkpoint,
    new_model,
    param_count,
    save_checkpoint,
)
from .train import TrainConfig, TrainHistory, grad_check, loss_ce, train_lm
from .prune import (
    PruneReport,
    PruneSchedule,
    TierSpec,
    build_schedule,
    collect_activation_norms,
    prune_svd,
    prune_wanda,
)
from .distill import (
    KDConfig,
    ProbabilityCache,
    build_cache,
    distill,
    kd_loss,
    load_cache,
    save_cache,
    soften,
)
from .evaluate import EvalProtocol, EvalResult, perplexity, windows
from .pipeline import (
    PipelineConfig,
    RoundConfig,
    RoundReport,
    TimingProfile,
    amdahl_max_speedup,
    emit_report,
    profile,
    run_pipeline,
    swap_teacher,
)

__version__ = "0.1.0"
