//! SRCC, PLCC and Cohen's kappa on small hand-made inputs.

use msm::metrics::{cohens_kappa, plcc, srcc, RatingVector, ScorePairSeries};

fn main() -> msm::error::Result<()> {
    let series = ScorePairSeries::new(vec![0.1, 0.4, 0.35, 0.8, 0.8], vec![1.0, 2.0, 3.0, 4.0, 5.0])?;
    println!("SRCC {:.4}  PLCC {:.4}", srcc(&series)?, plcc(&series)?);

    let a = RatingVector::from_choices(["A", "A", "A", "B"]);
    let b = RatingVector::from_choices(["A", "A", "B", "B"]);
    println!("kappa {:.2}", cohens_kappa(&a, &b)?);
    Ok(())
}
