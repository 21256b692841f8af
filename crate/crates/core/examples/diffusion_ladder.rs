//! Trains a small epsilon predictor and prints how far early-stopped
//! reverse samples sit from the data, per stop step.
//!
//! cargo run --release --example diffusion_ladder -- 300

use msm::diffusion::{build_linear_schedule, reverse_sample_ladder, train_epsilon_predictor, DiffusionHyper, EpsilonConfig};
use msm::imaging::phantom_set;

fn main() -> msm::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let clean = phantom_set(0, 32, 32)?;
    let schedule = build_linear_schedule(200, 1e-4, 0.02)?;
    let hyper = DiffusionHyper { steps, ..DiffusionHyper::default() };
    let model = train_epsilon_predictor(&clean, &schedule, &EpsilonConfig::default(), &hyper)?;
    println!("{} parameters, loss {:?} -> {:?}", model.num_parameters(), model.manifest().initial_loss, model.manifest().final_loss);

    let stops = [0, 40, 80, 120, 160];
    let ladder = reverse_sample_ladder(&model, &schedule, &stops, (32, 32), &[1, 2, 3, 4])?;
    for (j, t) in stops.iter().enumerate() {
        let var: f64 = ladder.iter().map(|row| row[j].variance()).sum::<f64>() / ladder.len() as f64;
        println!("stop {t:>3}: mean pixel variance {var:.4}");
    }
    Ok(())
}
