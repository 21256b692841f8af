use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{
    AblationGrid, BackboneRecipe, DiffusionLadderSpec, ExperimentConfig, ExperimentKind, LadderSpec, SweepSpec,
};
use super::folds::{grouped_kfold, Fold};
use super::pairs::SessionBundle;
use super::report::{CorrelationRow, FoldRow, Provenance, ReportBundle, ScoreRow, SweepCurve};
use crate::backbone::{build_backbone, dataset_hash, train_identity, Predictor, TrainedBackbone};
use crate::denoise::train_fixed_noise_denoiser;
use crate::diffusion::{build_linear_schedule, reverse_sample_ladder, train_epsilon_predictor, EpsilonPredictor};
use crate::distort::{add_gaussian_noise, build_ladder};
use crate::error::{MsmError, Result};
use crate::imaging::ImageGrid;
use crate::metrics::{msm_scores, plcc, psnr, srcc, DifferenceMeasure, ScorePairSeries};
use crate::rng;

/// Distortion label of the early-stopped diffusion ladder.
pub const DIFFUSION_LADDER: &str = "ddpm";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Single-threaded scoring. Results are identical either way; this only
    /// removes scheduling from the picture.
    pub deterministic: bool,
}

/// A finished run: the report plus, for pair experiments, the session.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: ReportBundle,
    pub session: Option<SessionBundle>,
}

impl Outcome {
    /// Writes the report files and any session into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.report.write(dir.as_ref())?;
        if let Some(s) = &self.session {
            s.write(dir.as_ref().join("sessions"))?;
        }
        Ok(())
    }
}

pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    config.validate()?;
    let report = match config.kind {
        ExperimentKind::Sweep => run_specialization_sweep(config)?,
        ExperimentKind::Correlate => run_correlation_experiment(config, opts)?,
        ExperimentKind::Ablate => run_ablation_grid(config, opts)?,
        ExperimentKind::Pairs => {
            let (report, session) = super::pairs::run_pairs_experiment(config)?;
            return Ok(Outcome { report, session: Some(session) });
        }
        ExperimentKind::Report => super::kappa_report::run_report(config)?,
    };
    Ok(Outcome { report, session: None })
}

pub(crate) fn provenance(config: &ExperimentConfig) -> Result<Provenance> {
    // The output directory does not change results.
    let mut hashed = config.clone();
    hashed.out = None;
    let canonical = serde_json::to_vec(&serde_json::to_value(&hashed)?)?;
    Ok(Provenance {
        seed: config.seed,
        config_hash: hex::encode(Sha256::digest(canonical)),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        ..Default::default()
    })
}

pub(crate) fn obtain_backbone(recipe: &BackboneRecipe, train: &[ImageGrid], seed: u64) -> Result<TrainedBackbone> {
    if let Some(path) = &recipe.checkpoint {
        let model = TrainedBackbone::load(path)?;
        if model.config() != &recipe.config {
            return Err(MsmError::arg(format!("{} does not hold the configured architecture", path.display())));
        }
        return Ok(model);
    }
    let init = build_backbone(&recipe.config, seed)?;
    train_identity(&init, train, &recipe.loss, &recipe.hyper, None)
}

/// Scores of one distortion ladder for one image: `(level, score per measure)`.
type RungScores = Vec<(f64, Vec<f64>)>;

fn ladder_seed(seed: u64, image: usize, kind: usize) -> u64 {
    rng::splitmix_pair(seed, ((image as u64) << 8) | kind as u64)
}

fn score_ladders(
    backbone: &dyn Predictor,
    images: &[(usize, &ImageGrid)],
    ladder: &LadderSpec,
    kind_index: usize,
    measures: &[DifferenceMeasure],
    seed: u64,
    opts: RunOptions,
) -> Result<Vec<RungScores>> {
    let one = |&(id, img): &(usize, &ImageGrid)| -> Result<RungScores> {
        let l = build_ladder(img, ladder.kind, &ladder.levels, ladder_seed(seed, id, kind_index))?;
        let rungs: Vec<ImageGrid> = l.rungs.iter().map(|r| r.image.clone()).collect();
        let scores = msm_scores(backbone, &rungs, measures)?;
        Ok(l.levels().into_iter().zip(scores).map(|(lv, s)| (lv, s.into_iter().map(|q| q.value).collect())).collect())
    };
    if opts.deterministic {
        images.iter().map(one).collect()
    } else {
        images.par_iter().map(one).collect()
    }
}

struct SeriesStats {
    points: usize,
    srcc: Option<f64>,
    plcc: Option<f64>,
    srcc_per_image: Option<f64>,
    note: Option<String>,
}

fn series_stats(per_image: &[Vec<(f64, f64)>]) -> SeriesStats {
    let mut pooled = ScorePairSeries::default();
    let mut per = Vec::new();
    let mut note = None;
    for img in per_image {
        let s = ScorePairSeries::new(img.iter().map(|p| p.1).collect(), img.iter().map(|p| p.0).collect())
            .expect("equal lengths");
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            pooled.push(x, y);
        }
        if let Ok(r) = srcc(&s) {
            per.push(r.abs());
        }
    }
    let mut grab = |r: Result<f64>| match r {
        Ok(v) => Some(v.abs()),
        Err(e) => {
            note = Some(format!("undefined: {e}"));
            None
        }
    };
    let srcc_v = grab(srcc(&pooled));
    let plcc_v = grab(plcc(&pooled));
    let srcc_per_image = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    SeriesStats { points: pooled.len(), srcc: srcc_v, plcc: plcc_v, srcc_per_image, note }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    if v.is_empty() || v.iter().any(Option::is_none) {
        return None;
    }
    Some(v.iter().flatten().sum::<f64>() / v.len() as f64)
}

/// Cell identity shared by the rows of one backbone.
#[derive(Clone)]
struct Cell {
    arch: String,
    loss: String,
}

#[derive(Default)]
struct Accumulator {
    /// (measure, distortion) -> per fold rows
    folds: BTreeMap<(DifferenceMeasure, String), Vec<FoldRow>>,
    notes: BTreeMap<(DifferenceMeasure, String), String>,
}

impl Accumulator {
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        cell: &Cell,
        fold: usize,
        backbone_hash: &str,
        distortion: &str,
        measures: &[DifferenceMeasure],
        scored: &[RungScores],
    ) {
        for (m, &measure) in measures.iter().enumerate() {
            let per_image: Vec<Vec<(f64, f64)>> =
                scored.iter().map(|rungs| rungs.iter().map(|(lv, s)| (*lv, s[m])).collect()).collect();
            let st = series_stats(&per_image);
            let key = (measure, distortion.to_string());
            if let Some(n) = st.note {
                self.notes.insert(key.clone(), n);
            }
            self.folds.entry(key).or_default().push(FoldRow {
                arch: cell.arch.clone(),
                loss: cell.loss.clone(),
                measure,
                distortion: distortion.to_string(),
                fold,
                points: st.points,
                srcc: st.srcc,
                plcc: st.plcc,
                srcc_per_image: st.srcc_per_image,
                backbone_hash: backbone_hash.to_string(),
            });
        }
    }

    fn finish(self, cell: &Cell, report: &mut ReportBundle) {
        for ((measure, distortion), rows) in self.folds {
            let note = self.notes.get(&(measure, distortion.clone())).cloned();
            report.correlations.push(CorrelationRow {
                arch: cell.arch.clone(),
                loss: cell.loss.clone(),
                measure,
                distortion,
                srcc: mean_defined(rows.iter().map(|r| r.srcc)),
                plcc: mean_defined(rows.iter().map(|r| r.plcc)),
                srcc_per_image: mean_defined(rows.iter().map(|r| r.srcc_per_image)),
                folds: rows.len(),
                note,
                best: false,
            });
            report.folds.extend(rows);
        }
    }
}

fn score_rows(
    report: &mut ReportBundle,
    ids: &[String],
    distortion: &str,
    measures: &[DifferenceMeasure],
    scored: &[RungScores],
    backbone_hash: &str,
) {
    for (id, rungs) in ids.iter().zip(scored) {
        for (level, values) in rungs {
            for (&measure, &value) in measures.iter().zip(values) {
                report.scores.push(ScoreRow {
                    image_id: id.clone(),
                    distortion_kind: distortion.to_string(),
                    level: *level,
                    measure,
                    value,
                    orientation: measure.orientation(),
                    backbone_hash: backbone_hash.to_string(),
                });
            }
        }
    }
}

/// Correlates MSM scores of already-trained backbones with distortion
/// levels over the held-out images of every fold. `backbones[k]` scores
/// fold `k`; pass the same model for every fold when it was trained on
/// separate data.
#[allow(clippy::too_many_arguments)]
pub fn correlate_folds(
    backbones: &[&dyn Predictor],
    arch: &str,
    loss: &str,
    images: &[ImageGrid],
    folds: &[Fold],
    ladders: &[LadderSpec],
    measures: &[DifferenceMeasure],
    seed: u64,
    opts: RunOptions,
    report: &mut ReportBundle,
) -> Result<()> {
    if backbones.len() != folds.len() {
        return Err(MsmError::arg("one backbone per fold required"));
    }
    let cell = Cell { arch: arch.to_string(), loss: loss.to_string() };
    let mut acc = Accumulator::default();
    for (fold, backbone) in folds.iter().zip(backbones) {
        let held: Vec<(usize, &ImageGrid)> = fold.test.iter().map(|&i| (i, &images[i])).collect();
        let ids: Vec<String> = fold.test.iter().map(|i| format!("img{i:04}")).collect();
        let hash = backbone.model_hash();
        for (k, ladder) in ladders.iter().enumerate() {
            let scored = score_ladders(*backbone, &held, ladder, k, measures, seed, opts)?;
            acc.add(&cell, fold.index, &hash, ladder.kind.as_str(), measures, &scored);
            score_rows(report, &ids, ladder.kind.as_str(), measures, &scored, &hash);
        }
    }
    acc.finish(&cell, report);
    Ok(())
}

/// Diffusion samples stopped at each step of `spec.stops`, correlated with
/// the stop step. One trajectory per sample index, snapshotted at every stop.
pub fn correlate_diffusion(
    backbone: &dyn Predictor,
    model: &EpsilonPredictor,
    spec: &DiffusionLadderSpec,
    shape: (usize, usize),
    arch: &str,
    loss: &str,
    measures: &[DifferenceMeasure],
    seed: u64,
    report: &mut ReportBundle,
) -> Result<()> {
    let schedule = build_linear_schedule(spec.t_max, spec.beta_start, spec.beta_end)?;
    let seeds: Vec<u64> = (0..spec.samples_per_stop as u64).map(|i| rng::splitmix_pair(seed, 0xD1FF_0000 + i)).collect();
    let samples = reverse_sample_ladder(model, &schedule, &spec.stops, shape, &seeds)?;
    let hash = backbone.model_hash();
    let mut scored: Vec<RungScores> = Vec::new();
    for row in &samples {
        let q = msm_scores(backbone, row, measures)?;
        scored.push(spec.stops.iter().zip(q).map(|(&t, s)| (t as f64, s.iter().map(|x| x.value).collect())).collect());
    }
    let cell = Cell { arch: arch.to_string(), loss: loss.to_string() };
    let mut acc = Accumulator::default();
    acc.add(&cell, 0, &hash, DIFFUSION_LADDER, measures, &scored);
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("ddpm{i:03}")).collect();
    score_rows(report, &ids, DIFFUSION_LADDER, measures, &scored, &hash);
    acc.finish(&cell, report);
    Ok(())
}

pub(crate) fn obtain_diffusion(spec: &DiffusionLadderSpec, seed: u64) -> Result<(EpsilonPredictor, (usize, usize))> {
    if let Some(path) = &spec.checkpoint {
        let m = EpsilonPredictor::load(path)?;
        let shape = match &spec.train_set {
            super::config::DatasetSource::Phantoms { size, .. } => (*size, *size),
            other => other.load()?[0].dims(),
        };
        return Ok((m, shape));
    }
    let train = spec.train_set.load()?;
    let schedule = build_linear_schedule(spec.t_max, spec.beta_start, spec.beta_end)?;
    let hyper = crate::diffusion::DiffusionHyper { seed: spec.hyper.seed ^ seed, ..spec.hyper.clone() };
    let m = train_epsilon_predictor(&train, &schedule, &spec.model, &hyper)?;
    Ok((m, train[0].dims()))
}

struct Evaluation<'a> {
    config: &'a ExperimentConfig,
    images: Vec<ImageGrid>,
    folds: Vec<Fold>,
    train: Option<Vec<ImageGrid>>,
}

impl<'a> Evaluation<'a> {
    fn prepare(config: &'a ExperimentConfig, report: &mut ReportBundle) -> Result<Self> {
        let images = config.dataset.load()?;
        let folds = grouped_kfold(images.len(), &config.split, config.seed)?;
        report.provenance.datasets.insert("evaluation".into(), dataset_hash(&images));
        let train = match &config.train_set {
            Some(src) => {
                let t = src.load()?;
                let held: std::collections::HashSet<String> = images.iter().map(|i| i.content_hash()).collect();
                if t.iter().any(|i| held.contains(&i.content_hash())) {
                    return Err(MsmError::arg("training and evaluation images overlap"));
                }
                report.provenance.datasets.insert("training".into(), dataset_hash(&t));
                Some(t)
            }
            None => None,
        };
        Ok(Self { config, images, folds, train })
    }

    /// One backbone per fold (shared when a separate training set exists).
    fn backbones(&self, recipe: &BackboneRecipe, report: &mut ReportBundle, label: &str) -> Result<Vec<TrainedBackbone>> {
        let seed = self.config.seed;
        let models = match &self.train {
            Some(t) => vec![obtain_backbone(recipe, t, seed)?; self.folds.len()],
            None => self
                .folds
                .iter()
                .map(|f| {
                    let t: Vec<ImageGrid> = f.train.iter().map(|&i| self.images[i].clone()).collect();
                    obtain_backbone(recipe, &t, seed)
                })
                .collect::<Result<_>>()?,
        };
        for (k, m) in models.iter().enumerate() {
            report.provenance.models.insert(format!("{label}/fold{k}"), m.weights_hash());
        }
        Ok(models)
    }

    fn evaluate(
        &self,
        recipe: &BackboneRecipe,
        measures: &[DifferenceMeasure],
        opts: RunOptions,
        report: &mut ReportBundle,
    ) -> Result<()> {
        let (arch, loss) = (recipe.config.arch_name(), recipe.loss.name());
        let models = self.backbones(recipe, report, &format!("{arch}/{loss}"))?;
        let refs: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
        let c = self.config;
        correlate_folds(&refs, arch, loss, &self.images, &self.folds, &c.ladders, measures, c.seed, opts, report)?;
        if let Some(spec) = &c.diffusion {
            let (eps, shape) = obtain_diffusion(spec, c.seed)?;
            report.provenance.models.insert("ddpm".into(), eps.weights_hash());
            correlate_diffusion(refs[0], &eps, spec, shape, arch, loss, measures, c.seed, report)?;
        }
        Ok(())
    }
}

pub fn run_correlation_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<ReportBundle> {
    let mut report = ReportBundle::new(ExperimentKind::Correlate, provenance(config)?);
    let eval = Evaluation::prepare(config, &mut report)?;
    eval.evaluate(&config.backbone, &config.measures, opts, &mut report)?;
    Ok(report)
}

/// One correlation experiment per (architecture, loss) backbone and
/// measure; the best (loss, measure) cell of each architecture, by mean
/// |SRCC| over distortions, is flagged.
pub fn run_ablation_grid(config: &ExperimentConfig, opts: RunOptions) -> Result<ReportBundle> {
    let grid: &AblationGrid = config.ablation.as_ref().ok_or_else(|| MsmError::arg("missing ablation grid"))?;
    if grid.archs.is_empty() || grid.losses.is_empty() || grid.measures.is_empty() {
        return Err(MsmError::arg("empty ablation grid"));
    }
    let mut report = ReportBundle::new(ExperimentKind::Ablate, provenance(config)?);
    let eval = Evaluation::prepare(config, &mut report)?;
    for arch in &grid.archs {
        for loss in &grid.losses {
            let recipe =
                BackboneRecipe { config: arch.clone(), loss: loss.clone(), checkpoint: None, ..config.backbone.clone() };
            eval.evaluate(&recipe, &grid.measures, opts, &mut report)?;
        }
    }
    flag_best(&mut report);
    Ok(report)
}

fn flag_best(report: &mut ReportBundle) {
    let mut cells: BTreeMap<(String, String, DifferenceMeasure), Vec<Option<f64>>> = BTreeMap::new();
    for r in &report.correlations {
        cells.entry((r.arch.clone(), r.loss.clone(), r.measure)).or_default().push(r.srcc);
    }
    let mut best: BTreeMap<String, ((String, DifferenceMeasure), f64)> = BTreeMap::new();
    for ((arch, loss, measure), v) in cells {
        let Some(mean) = mean_defined(v.into_iter()) else { continue };
        let slot = best.entry(arch).or_insert(((loss.clone(), measure), f64::MIN));
        if mean > slot.1 {
            *slot = ((loss, measure), mean);
        }
    }
    for r in &mut report.correlations {
        if let Some(((loss, measure), _)) = best.get(&r.arch) {
            r.best = *loss == r.loss && *measure == r.measure;
        }
    }
}

/// Mean output PSNR of `denoise` over `clean` at every test sigma; the
/// noise for image `i` at grid point `j` is seeded from `(seed, i, j)`.
pub fn psnr_curve(
    denoise: impl Fn(&[ImageGrid]) -> Result<Vec<ImageGrid>>,
    clean: &[ImageGrid],
    test_sigmas: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    test_sigmas
        .iter()
        .enumerate()
        .map(|(j, &sigma)| {
            let noisy: Vec<ImageGrid> = clean
                .iter()
                .enumerate()
                .map(|(i, c)| add_gaussian_noise(c, sigma, rng::splitmix_pair(seed, ((i as u64) << 16) | j as u64)))
                .collect::<Result<_>>()?;
            let out = denoise(&noisy)?;
            let total: f64 = out.iter().zip(clean).map(|(o, c)| psnr(c, o)).sum::<Result<f64>>()?;
            Ok(total / clean.len() as f64)
        })
        .collect()
}

pub fn run_specialization_sweep(config: &ExperimentConfig) -> Result<ReportBundle> {
    let spec: &SweepSpec = config.sweep.as_ref().ok_or_else(|| MsmError::arg("missing sweep section"))?;
    if spec.test_sigmas.is_empty() {
        return Err(MsmError::arg("empty test sigma grid"));
    }
    if spec.train_sigmas.is_empty() {
        return Err(MsmError::arg("no training sigmas"));
    }
    for &s in &spec.train_sigmas {
        if !spec.test_sigmas.iter().any(|&t| (t - s).abs() < 1e-9) {
            return Err(MsmError::arg(format!("test grid does not cover training sigma {s}")));
        }
    }
    let mut report = ReportBundle::new(ExperimentKind::Sweep, provenance(config)?);
    let train = config.train_set.as_ref().unwrap_or(&config.dataset).load()?;
    let test = spec.test_set.load()?;
    report.provenance.datasets.insert("training".into(), dataset_hash(&train));
    report.provenance.datasets.insert("test".into(), dataset_hash(&test));
    for &sigma in &spec.train_sigmas {
        let hyper = crate::backbone::TrainingHyper { seed: spec.hyper.seed ^ config.seed, ..spec.hyper.clone() };
        let model = train_fixed_noise_denoiser(&spec.arch, &train, sigma, &hyper)?;
        let curve = psnr_curve(|x| model.apply_many(x), &test, &spec.test_sigmas, config.seed)?;
        let best = curve.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("non-empty");
        report.provenance.models.insert(format!("denoiser/sigma={sigma}"), model.model_hash());
        report.sweep.push(SweepCurve {
            train_sigma: sigma,
            test_sigmas: spec.test_sigmas.clone(),
            argmax_sigma: spec.test_sigmas[best],
            monotone_decreasing: curve.windows(2).all(|w| w[1] < w[0]),
            mean_psnr: curve,
            model_hash: model.model_hash(),
            final_loss: model.manifest().and_then(|m| m.log.as_ref()).map_or(f64::NAN, |l| l.final_loss),
        });
    }
    Ok(report)
}
