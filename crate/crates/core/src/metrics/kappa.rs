use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};

/// Categorical choices keyed by item id, in item order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingVector {
    pub items: Vec<String>,
    pub choices: Vec<String>,
}

impl RatingVector {
    pub fn new(items: Vec<String>, choices: Vec<String>) -> Result<Self> {
        if items.len() != choices.len() {
            return Err(MsmError::arg("items and choices differ in length"));
        }
        Ok(Self { items, choices })
    }

    /// Items numbered `0..n`, convenient for tests and synthetic raters.
    pub fn from_choices<S: Into<String>>(choices: impl IntoIterator<Item = S>) -> Self {
        let choices: Vec<String> = choices.into_iter().map(Into::into).collect();
        Self { items: (0..choices.len()).map(|i| i.to_string()).collect(), choices }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`; exactly 1 when the raters agree
/// on every item.
pub fn cohens_kappa(a: &RatingVector, b: &RatingVector) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MsmError::arg("kappa over zero items"));
    }
    if a.items != b.items {
        return Err(MsmError::arg("rating vectors are not aligned on the same items"));
    }
    let n = a.len() as f64;
    let agree = a.choices.iter().zip(&b.choices).filter(|(x, y)| x == y).count();
    if agree == a.len() {
        return Ok(1.0);
    }
    let mut marg: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for c in &a.choices {
        marg.entry(c).or_default().0 += 1;
    }
    for c in &b.choices {
        marg.entry(c).or_default().1 += 1;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = marg.values().map(|&(x, y)| (x as f64 / n) * (y as f64 / n)).sum();
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(s: &str) -> RatingVector {
        RatingVector::from_choices(s.chars().map(|c| c.to_string()))
    }

    #[test]
    fn fixtures() {
        assert_eq!(cohens_kappa(&rv("ABBA"), &rv("ABBA")).unwrap(), 1.0);
        assert!(cohens_kappa(&rv("AABB"), &rv("ABAB")).unwrap().abs() < 1e-15);
        assert!((cohens_kappa(&rv("AAAB"), &rv("AABB")).unwrap() - 0.5).abs() < 1e-15);
        // single category everywhere: p_o = p_e = 1
        assert_eq!(cohens_kappa(&rv("AAAA"), &rv("AAAA")).unwrap(), 1.0);
    }

    #[test]
    fn misaligned_or_empty() {
        assert!(cohens_kappa(&rv(""), &rv("")).is_err());
        assert!(cohens_kappa(&rv("AB"), &rv("ABA")).is_err());
        let mut b = rv("AB");
        b.items[0] = "x".into();
        assert!(cohens_kappa(&rv("AB"), &b).is_err());
    }
}
