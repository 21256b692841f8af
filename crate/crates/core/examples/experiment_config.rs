//! Runs a small correlation experiment from a JSON config and writes the
//! report bundle.
//!
//! cargo run --release --example experiment_config -- out/experiment

use msm::harness::{run_experiment, ExperimentConfig, RunOptions};

const CONFIG: &str = r#"{
    "kind": "correlate",
    "seed": 1,
    "dataset": {"source": "phantoms", "first_seed": 10000, "count": 16, "size": 32},
    "train_set": {"source": "phantoms", "first_seed": 0, "count": 32, "size": 32},
    "split": {"folds": 2, "group_size": 4},
    "backbone": {
        "config": {"arch": "unet", "depth": 2, "base_channels": 8},
        "loss": {"kind": "l2"},
        "hyper": {"batch_size": 8, "epochs": 10, "lr": 0.001, "lr_decay": 0.98, "seed": 0}
    },
    "measures": ["L2", "S_SSIM"]
}"#;

fn main() -> msm::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/experiment".into());
    let config: ExperimentConfig = serde_json::from_str(CONFIG)?;
    let outcome = run_experiment(&config, RunOptions::default())?;
    for row in &outcome.report.correlations {
        println!("{:>15} {:>6}: |SRCC| {:?}", row.distortion, row.measure.to_string(), row.srcc);
    }
    outcome.write(&out)?;
    println!("wrote {out}/report.json");
    Ok(())
}
