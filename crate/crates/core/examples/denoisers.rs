//! Compares a median filter with a DnCNN-lite trained on synthetic sodium
//! noise, by PSNR on held-out noisy slices.

use msm::backbone::TrainingHyper;
use msm::denoise::{sodium_pairs, train_sodium_denoiser, DenoiserArch, DenoiserModel, NoiseRange};
use msm::imaging::phantom_set;
use msm::metrics::psnr;

fn main() -> msm::error::Result<()> {
    let pairs = sodium_pairs(&phantom_set(0, 32, 32)?, NoiseRange::default(), 1)?;
    let hyper = TrainingHyper { epochs: 10, lr_decay: 0.98, ..TrainingHyper::default() };
    let learned = train_sodium_denoiser(&DenoiserArch::dncnn(), &pairs, &hyper)?;
    let median = DenoiserModel::median(3)?;

    let test = sodium_pairs(&phantom_set(9000, 8, 32)?, NoiseRange::fixed(0.1), 2)?;
    for (name, model) in [("noisy", None), ("median-3", Some(&median)), ("dncnn-lite", Some(&learned))] {
        let mut total = 0.0;
        for (noisy, clean) in test.noisy.iter().zip(&test.clean) {
            let out = match model {
                Some(m) => m.apply(noisy)?,
                None => noisy.clone(),
            };
            total += psnr(clean, &out)?;
        }
        println!("{name:>10}: mean PSNR {:.2} dB", total / test.noisy.len() as f64);
    }
    Ok(())
}
