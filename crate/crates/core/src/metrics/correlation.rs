use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};

/// Paired samples: metric results `xs` against known levels `ys`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorePairSeries {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl ScorePairSeries {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(MsmError::arg(format!("series lengths differ: {} vs {}", xs.len(), ys.len())));
        }
        Ok(Self { xs, ys })
    }

    pub fn push(&mut self, x: f64, y: f64) {
        self.xs.push(x);
        self.ys.push(y);
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { xs: self.ys.clone(), ys: self.xs.clone() }
    }

    fn check(&self) -> Result<()> {
        if self.xs.len() != self.ys.len() {
            return Err(MsmError::arg("series lengths differ"));
        }
        if self.xs.len() < 3 {
            return Err(MsmError::Undefined(format!("correlation needs n >= 3, got {}", self.xs.len())));
        }
        if self.xs.iter().chain(&self.ys).any(|v| !v.is_finite()) {
            return Err(MsmError::arg("non-finite sample"));
        }
        Ok(())
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MsmError::Undefined("constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation (signed).
pub fn plcc(series: &ScorePairSeries) -> Result<f64> {
    series.check()?;
    pearson(&series.xs, &series.ys)
}

/// 1-based ranks, ties receiving the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (signed): Pearson of average ranks, which
/// equals `1 - 6 sum(d^2) / (n (n^2 - 1))` when there are no ties.
pub fn srcc(series: &ScorePairSeries) -> Result<f64> {
    series.check()?;
    pearson(&average_ranks(&series.xs), &average_ranks(&series.ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(xs: &[f64], ys: &[f64]) -> ScorePairSeries {
        ScorePairSeries::new(xs.to_vec(), ys.to_vec()).unwrap()
    }

    #[test]
    fn fixtures() {
        assert!((plcc(&s(&[1., 2., 3.], &[2., 4., 6.])).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&s(&[1., 2., 3.], &[6., 4., 2.])).unwrap() + 1.0).abs() < 1e-15);
        assert!((plcc(&s(&[1., 2., 3., 4.], &[1., 3., 2., 4.])).unwrap() - 0.8).abs() < 1e-12);
        assert!((srcc(&s(&[1., 2., 3., 4.], &[1., 3., 2., 4.])).unwrap() - 0.8).abs() < 1e-12);
        assert!((srcc(&s(&[1., 5., 9.], &[0.1, 0.2, 7.])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[1., 1., 2.]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3., 1., 3., 3.]), vec![3.0, 1.0, 3.0, 3.0]);
        let r = srcc(&s(&[1., 1., 2.], &[1., 2., 3.])).unwrap();
        // Pearson of (1.5, 1.5, 3) against (1, 2, 3)
        let want = 1.5 / (1.5f64.sqrt() * 2f64.sqrt());
        assert!((r - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_series() {
        assert!(matches!(plcc(&s(&[1., 1., 1.], &[1., 2., 3.])), Err(MsmError::Undefined(_))));
        assert!(matches!(srcc(&s(&[1., 2., 3.], &[5., 5., 5.])), Err(MsmError::Undefined(_))));
        assert!(matches!(plcc(&s(&[1., 2.], &[1., 2.])), Err(MsmError::Undefined(_))));
        assert!(ScorePairSeries::new(vec![1.0], vec![]).is_err());
    }
}
