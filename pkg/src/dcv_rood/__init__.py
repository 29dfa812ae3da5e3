"""Dual cross-validation for evaluating out-of-distribution detectors."""

from .detectors import ScoreTable, ebo_scores, gen_scores, knn_scores, fit_mds, mds_scores
from .errors import DcvRoodError, DcvRoodWarning, ValidationError
from .metrics import LabeledScores, MetricReport, evaluate_round, evaluate_scores
from .rng import SplitMix64, hash64
from .splitter import (
    EvaluationRound,
    FoldAssignment,
    SplitSpec,
    assemble_rounds,
    build_folds_flat,
    build_folds_hierarchical,
    select_id_ood_split,
)
from .stats import (
    FidelityReport,
    ResultVector,
    SignificanceMatrix,
    hit_error_rates,
    mann_whitney_u,
    methodwise_comparison,
    pairwise_matrix,
    shapiro_wilk,
    students_t,
)
from .taxonomy import ClassNode, ClassTaxonomy, SampleRecord, SampleSet, load_sample_set

__version__ = "0.1.0"
