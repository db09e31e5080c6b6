"""MC-dropout uncertainty measures and threshold-based active learning for segmentation."""

from .metrics import (
    Measure,
    MeanPrediction,
    PredictionStack,
    UncertaintyScores,
    VoteStats,
    acquisition_score,
    acquisition_value,
    compute,
    image_uncertainty,
    margin_of_confidence,
    mean_prediction,
    measure_bounds,
    mutual_information,
    predictive_entropy,
    total_variance,
    variation_ratio,
    vote_stats,
)
from .pool import (
    PoolState,
    ScoreRecord,
    SelectionRound,
    SplitPools,
    StopConfig,
    StopDecision,
    ThresholdSpec,
    check_stop,
    compute_thresholds,
    discard_rule,
    random_baseline_round,
    scan_and_select,
    seed_initial,
)
from .evaluation import ConfusionMatrix, SegEvalReport, accumulate, iou_report, merge
from .study import StabilityConfig, StabilityReport, run_stability, write_stability_csv
from .sim import (
    ExperimentConfig,
    ExperimentResult,
    MockPredictor,
    PatternFamily,
    SyntheticDataset,
    SyntheticWorld,
    generate_dataset,
    run_experiment,
)

__version__ = "0.1.0"
