//! Difference measures, the MSM score, and agreement statistics.

mod correlation;
mod difference;
mod kappa;
mod score;

pub use correlation::{average_ranks, plcc, srcc, ScorePairSeries};
pub use difference::{
    mean_abs_error, mean_squared_error, measure_difference, psnr, psnr_from_mse, ssim, DifferenceMeasure,
    Orientation, PSNR_CAP_DB, SSIM_SIGMA, SSIM_WINDOW,
};
pub use kappa::{cohens_kappa, RatingVector};
pub use score::{msm_score, msm_scores, QualityScore};
