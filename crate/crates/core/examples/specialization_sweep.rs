//! Trains denoisers at fixed noise levels and prints their mean output
//! PSNR across test noise levels.

use msm::backbone::TrainingHyper;
use msm::denoise::{train_fixed_noise_denoiser, DenoiserArch};
use msm::harness::psnr_curve;
use msm::imaging::phantom_set;

fn main() -> msm::error::Result<()> {
    let train = phantom_set(0, 32, 32)?;
    let test = phantom_set(10_000, 8, 32)?;
    let test_sigmas: Vec<f64> = (0..=8).map(|i| i as f64 * 0.025).collect();
    let hyper = TrainingHyper { epochs: 10, lr_decay: 0.98, ..TrainingHyper::default() };
    for sigma in [0.0, 0.1] {
        let model = train_fixed_noise_denoiser(&DenoiserArch::dncnn(), &train, sigma, &hyper)?;
        let curve = psnr_curve(|xs| model.apply_many(xs), &test, &test_sigmas, 5)?;
        let row: Vec<String> = curve.iter().map(|p| format!("{p:.1}")).collect();
        println!("trained at {sigma:.2}: {}", row.join(" "));
    }
    Ok(())
}
