use serde::{Deserialize, Serialize};

use super::difference::{measure_difference, DifferenceMeasure, Orientation};
use crate::backbone::Predictor;
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;

/// One MSM score with the metadata needed to rank it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub measure: DifferenceMeasure,
    pub orientation: Orientation,
    pub backbone_hash: String,
}

impl QualityScore {
    pub fn new(value: f64, measure: DifferenceMeasure, backbone_hash: impl Into<String>) -> Result<Self> {
        if !value.is_finite() {
            return Err(MsmError::Undefined(format!("non-finite {measure} score")));
        }
        Ok(Self { value, measure, orientation: measure.orientation(), backbone_hash: backbone_hash.into() })
    }

    /// True when `self` marks the better-quality image of the two.
    pub fn is_better_than(&self, other: &QualityScore) -> Result<bool> {
        if self.measure != other.measure {
            return Err(MsmError::arg(format!("cannot rank {} against {}", self.measure, other.measure)));
        }
        Ok(self.orientation.prefers(self.value, other.value))
    }
}

/// `difference(I, M(I))` under `measure`.
pub fn msm_score(backbone: &dyn Predictor, image: &ImageGrid, measure: DifferenceMeasure) -> Result<QualityScore> {
    let pred = backbone.predict(image)?;
    QualityScore::new(measure_difference(image, &pred, measure)?, measure, backbone.model_hash())
}

/// Scores every image under every measure with one (batched) prediction
/// per image; `out[i][j]` belongs to `images[i]` and `measures[j]`.
pub fn msm_scores(
    backbone: &dyn Predictor,
    images: &[ImageGrid],
    measures: &[DifferenceMeasure],
) -> Result<Vec<Vec<QualityScore>>> {
    let hash = backbone.model_hash();
    let preds = backbone.predict_many(images)?;
    images
        .iter()
        .zip(&preds)
        .map(|(img, pred)| {
            measures
                .iter()
                .map(|&m| QualityScore::new(measure_difference(img, pred, m)?, m, hash.clone()))
                .collect()
        })
        .collect()
}
