"""Long-tailed dataset distillation via statistics alignment.

Pipeline: debiased expert training (observer + teacher), fair BN statistics
recalibration, confidence-guided multi-round initialization, alignment-based
pixel recovery, teacher soft relabeling, and student-side evaluation.
"""

from .augment import CropAugmentConfig
from .autodiff import Tensor, finite_diff_check, no_grad
from .data import (
    LongTailDataset,
    LongTailSpec,
    balanced_split,
    expected_counts,
    gen_blobs,
    load_dataset,
    make_long_tail,
    save_dataset,
)
from .estimators import (
    DebiasedExpertClassifier,
    DistilledStudentClassifier,
    LongTailDistiller,
)
from .experts import (
    ClassFrequency,
    DivergenceError,
    ExpertCheckpoint,
    ExpertTrainConfig,
    HeadStack,
    MixedBatch,
    debias_loss,
    mix_views,
    robust_loss,
    train_expert,
)
from .initsel import (
    Candidate,
    CandidatePool,
    PoolExhaustedError,
    assemble_init,
    build_pool,
    gen_candidates,
    multi_round_select,
    score_pool,
)
from .nn import ConvNetSpec, Model, build_model, forward, load_checkpoint, save_checkpoint
from .optim import NonFiniteGradientError, OptimConfig, Optimizer, opt_step
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    render_report,
    run_pipeline,
)
from .recalib import (
    ClassMomentsTable,
    RealStatsBundle,
    finalize_global,
    load_bundle,
    merge_moments,
    recalibrate,
    save_bundle,
    update_class_moments,
)
from .recovery import AlignmentReport, RecoveryConfig, alignment_loss, recover
from .students import (
    DistilledSet,
    EvalReport,
    evaluate,
    load_distilled,
    match_loss,
    relabel,
    save_distilled,
    train_student,
)

__version__ = "0.1.0"
