use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use crate::error::{MsmError, Result};
use crate::metrics::{DifferenceMeasure, Orientation};

/// Aggregated correlation of one (backbone, loss, measure, distortion) cell.
/// Correlations are absolute values; `None` means undefined (see `note`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub arch: String,
    pub loss: String,
    pub measure: DifferenceMeasure,
    pub distortion: String,
    /// Pooled over every rung of every held-out image, averaged over folds.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    /// Mean of the per-image correlations.
    pub srcc_per_image: Option<f64>,
    pub folds: usize,
    pub note: Option<String>,
    #[serde(default)]
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub arch: String,
    pub loss: String,
    pub measure: DifferenceMeasure,
    pub distortion: String,
    pub fold: usize,
    pub points: usize,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub srcc_per_image: Option<f64>,
    pub backbone_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub train_sigma: f64,
    pub test_sigmas: Vec<f64>,
    pub mean_psnr: Vec<f64>,
    pub argmax_sigma: f64,
    pub monotone_decreasing: bool,
    pub model_hash: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEntry {
    pub a: String,
    pub b: String,
    pub kappa: Option<f64>,
    pub pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KappaMatrix {
    pub raters: Vec<String>,
    pub metrics: Vec<String>,
    /// Every rater pair, then every metric-rater pair.
    pub entries: Vec<KappaEntry>,
    /// Pairs rated by every rater; kappa is computed over these only.
    pub shared_pairs: usize,
    pub total_pairs: usize,
    pub skipped: usize,
}

/// One scored image: a row of a score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub distortion_kind: String,
    pub level: f64,
    pub measure: DifferenceMeasure,
    pub value: f64,
    pub orientation: Orientation,
    pub backbone_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
    pub datasets: BTreeMap<String, String>,
    pub models: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub correlations: Vec<CorrelationRow>,
    #[serde(default)]
    pub folds: Vec<FoldRow>,
    #[serde(default)]
    pub sweep: Vec<SweepCurve>,
    #[serde(default)]
    pub kappa: Option<KappaMatrix>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub scores: Vec<ScoreRow>,
}

impl ReportBundle {
    pub fn new(experiment: ExperimentKind, provenance: Provenance) -> Self {
        Self {
            experiment,
            correlations: Vec::new(),
            folds: Vec::new(),
            sweep: Vec::new(),
            kappa: None,
            notes: Vec::new(),
            provenance,
            scores: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsmError::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes `report.json` plus one CSV per non-empty table.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| MsmError::file(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| MsmError::file(&path, e))?;
        write_csv(dir.join("correlations.csv"), &self.correlations)?;
        write_csv(dir.join("folds.csv"), &self.folds)?;
        write_csv(dir.join("scores.csv"), &self.scores)?;
        let sweep: Vec<SweepPoint> = self
            .sweep
            .iter()
            .flat_map(|c| {
                c.test_sigmas.iter().zip(&c.mean_psnr).map(|(&test_sigma, &mean_psnr)| SweepPoint {
                    train_sigma: c.train_sigma,
                    test_sigma,
                    mean_psnr,
                })
            })
            .collect();
        write_csv(dir.join("sweep.csv"), &sweep)?;
        if let Some(k) = &self.kappa {
            write_csv(dir.join("kappa.csv"), &k.entries)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SweepPoint {
    train_sigma: f64,
    test_sigma: f64,
    mean_psnr: f64,
}

fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| MsmError::file(path.as_ref(), e))?;
    Ok(())
}

pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| MsmError::file(path.as_ref(), e))?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(MsmError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_csv_round_trips() {
        let rows = vec![ScoreRow {
            image_id: "a".into(),
            distortion_kind: "gaussian-noise".into(),
            level: 0.05,
            measure: DifferenceMeasure::SPsnr,
            value: 31.5,
            orientation: Orientation::HigherIsBetter,
            backbone_hash: "abc".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,distortion_kind,level,measure,value,orientation,backbone_hash\n"));
        assert!(text.contains("S_PSNR") && text.contains("higher-is-better"));
        assert_eq!(read_scores(&p).unwrap(), rows);
    }
}
