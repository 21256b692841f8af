//! Experiment runners, pairwise rating sessions and the rating server.

pub mod config;
pub mod experiments;
pub mod folds;
pub mod kappa_report;
pub mod pairs;
pub mod ratings;
pub mod report;
pub mod server;

pub use config::{
    AblationGrid, BackboneRecipe, DatasetSource, DiffusionLadderSpec, ExperimentConfig, ExperimentKind, LadderSpec,
    PairsSpec, ReportSpec, SweepSpec,
};
pub use experiments::{
    correlate_diffusion, correlate_folds, psnr_curve, run_ablation_grid, run_correlation_experiment, run_experiment,
    run_specialization_sweep, Outcome, RunOptions, DIFFUSION_LADDER,
};
pub use folds::{grouped_kfold, Fold, SplitSpec};
pub use kappa_report::{item_choices, kappa_report, metrics_from_rows, run_report, MetricScores};
pub use pairs::{
    image_url, make_pair_session, run_pairs_experiment, ItemProvenance, PairSession, PairView, SessionBundle,
    SessionItem, SessionPair, StoredItem,
};
pub use ratings::{read_ratings, Choice, RatingRecord, RatingStore};
pub use report::{
    read_scores, write_scores, CorrelationRow, FoldRow, KappaEntry, KappaMatrix, Provenance, ReportBundle, ScoreRow,
    SweepCurve,
};
pub use server::{router, serve, ServerState};
