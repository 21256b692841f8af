//! Builds the four standard distortion ladders of one phantom and prints
//! the PSNR of every rung against the clean image.

use msm::distort::{build_ladder, DistortionKind};
use msm::harness::LadderSpec;
use msm::imaging::phantom_set;
use msm::metrics::psnr;

fn main() -> msm::error::Result<()> {
    let clean = phantom_set(7, 1, 64)?.remove(0);
    for kind in DistortionKind::ALL {
        let spec = LadderSpec::standard(kind);
        let ladder = build_ladder(&clean, kind, &spec.levels, 1)?;
        let row: Vec<String> = ladder
            .rungs
            .iter()
            .map(|r| match psnr(&clean, &r.image) {
                Ok(p) => format!("{:.3}:{p:.1}", r.level),
                Err(_) => format!("{:.3}:inf", r.level),
            })
            .collect();
        println!("{kind:>15} {}", row.join(" "));
    }
    Ok(())
}
