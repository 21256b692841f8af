//! Trains a small identity backbone and shows MSM scores rising along a
//! Gaussian noise ladder.

use msm::backbone::{build_backbone, train_identity, BackboneConfig, LossKind, TrainingHyper, UnetConfig};
use msm::distort::{build_ladder, DistortionKind};
use msm::imaging::phantom_set;
use msm::metrics::{msm_scores, srcc, DifferenceMeasure, ScorePairSeries};

fn main() -> msm::error::Result<()> {
    let train = phantom_set(0, 32, 32)?;
    let init = build_backbone(&BackboneConfig::Unet(UnetConfig { depth: 2, base_channels: 8 }), 0)?;
    let hyper = TrainingHyper { epochs: 15, lr_decay: 0.98, ..TrainingHyper::default() };
    let model = train_identity(&init, &train, &LossKind::perceptual(), &hyper, None)?;
    println!("backbone {}", &model.weights_hash()[..12]);

    let test = phantom_set(5000, 1, 32)?.remove(0);
    let levels: Vec<f64> = (0..=10).map(|i| i as f64 * 0.025).collect();
    let ladder = build_ladder(&test, DistortionKind::GaussianNoise, &levels, 3)?;
    let images: Vec<_> = ladder.rungs.iter().map(|r| r.image.clone()).collect();
    let scores = msm_scores(&model, &images, &[DifferenceMeasure::L2])?;
    let values: Vec<f64> = scores.iter().map(|s| s[0].value).collect();
    for (sigma, v) in levels.iter().zip(&values) {
        println!("sigma {sigma:.3}  MSM-L2 {v:.5}");
    }
    println!("SRCC {:.3}", srcc(&ScorePairSeries::new(levels, values)?)?);
    Ok(())
}
