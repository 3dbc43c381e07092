"""Order-sensitive probing of frozen patch-token features.

Fixed scan families and a learned Sinkhorn soft permutation feed a linear
state-space readout; permutation-invariant pooling baselines, a
gradient-isolated joint trainer, and plan diagnostics round out the toolkit.
"""

__version__ = "0.1.0"

from .features import (
    Batch,
    FeatureSample,
    FeatureSet,
    SynthSpec,
    generate_synthetic,
    iterate_batches,
    read_features,
    synthetic_class_means,
    write_features,
)
from .scans import (
    Family,
    ScanFamily,
    ScanOrder,
    apply_order,
    build_family,
    diagonal_family,
    raster,
    raster_family,
    random_permutation,
    snake_family,
    vmamba_family,
)
from .ssm import (
    DiscretizedSystem,
    S4HeadOutput,
    S4Params,
    discretize,
    hippo_legs,
    init_s4_params,
    multi_direction_readout,
    s4_backward,
    s4_forward,
    spectral_radius,
)
from .routing import (
    Scorer,
    SinkhornConfig,
    TransportPlan,
    build_cost,
    init_scorer,
    load_plan,
    route_sinkhorn,
    save_plan,
    score_and_standardize,
    scramble_after_routing,
    sinkhorn,
    sinkhorn_backward,
    soft_reorder,
)
from .heads import (
    Classifier,
    PoolHead,
    PoolKind,
    attention_pool,
    classify,
    cls_head,
    content_weighted_pool,
    count_params,
    gap,
    init_classifier,
    topk_pool,
)
from .probes import HeadSpec, PassContext, ProbeHead, build_head
from .trainer import (
    TrainConfig,
    TrainRun,
    ablate_scramble,
    adamw_step,
    cosine_lr,
    cross_entropy,
    evaluate_head,
    sweep_sinkhorn_grid,
    sweep_state_dim,
    train_joint,
)
from .diagnostics import (
    DiagnosticsReport,
    EvidenceCurve,
    PlanDiagnostics,
    emit_report,
    evidence_curve,
    late_mass_statistic,
    parse_report,
    plan_diagnostics,
    stochasticity_report,
)
from .checkpoint import load_params, save_params
from .seeding import derive_rng, derive_seed
