use std::collections::{BTreeMap, BTreeSet};

use super::config::{ExperimentConfig, ExperimentKind};
use super::experiments::provenance;
use super::pairs::PairSession;
use super::ratings::{read_ratings, RatingRecord};
use super::report::{read_scores, KappaEntry, KappaMatrix, ReportBundle};
use crate::error::{MsmError, Result};
use crate::metrics::{cohens_kappa, QualityScore, RatingVector};

/// A metric's scores keyed by item id or image hash.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricScores {
    pub name: String,
    pub scores: BTreeMap<String, QualityScore>,
}

const FIRST: &str = "first";
const SECOND: &str = "second";

/// Item-level choices per rater: `rater -> pair -> chosen item`. Skips are
/// dropped; every record must match the session's presentation.
pub fn item_choices(session: &PairSession, ratings: &[RatingRecord]) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in ratings {
        if r.session_id != session.id {
            return Err(MsmError::arg(format!("rating for session {} in report of {}", r.session_id, session.id)));
        }
        let pair = session.pair(&r.pair_id).ok_or_else(|| MsmError::NotFound(format!("pair {}", r.pair_id)))?;
        if pair.left != r.left_item || pair.right != r.right_item {
            return Err(MsmError::arg(format!("rating of {} does not match its presentation", r.pair_id)));
        }
        if !seen.insert((r.rater.clone(), r.pair_id.clone())) {
            return Err(MsmError::Conflict(format!("{} rated {} twice", r.rater, r.pair_id)));
        }
        let rater = out.entry(r.rater.clone()).or_default();
        if let Some(item) = r.chosen_item() {
            rater.insert(r.pair_id.clone(), item.to_string());
        }
    }
    Ok(out)
}

fn metric_choice(session: &PairSession, metric: &MetricScores, pair_id: &str) -> Result<&'static str> {
    let pair = session.pair(pair_id).expect("shared pairs exist");
    let lookup = |item: &str| -> Result<&QualityScore> {
        let hash = &session.item(item).expect("items exist").image_hash;
        metric
            .scores
            .get(item)
            .or_else(|| metric.scores.get(hash))
            .ok_or_else(|| MsmError::NotFound(format!("{} has no score for item {item}", metric.name)))
    };
    let (a, b) = (lookup(&pair.first)?, lookup(&pair.second)?);
    // Ties go to the second item.
    Ok(if a.is_better_than(b)? { FIRST } else { SECOND })
}

fn vector<'a>(items: &[String], cats: impl IntoIterator<Item = &'a str>) -> RatingVector {
    RatingVector { items: items.to_vec(), choices: cats.into_iter().map(String::from).collect() }
}

/// Cohen's kappa for every rater pair and every metric-rater pair over the
/// pairs rated (not skipped) by all raters.
pub fn kappa_report(session: &PairSession, ratings: &[RatingRecord], metrics: &[MetricScores]) -> Result<KappaMatrix> {
    let choices = item_choices(session, ratings)?;
    if choices.is_empty() {
        return Err(MsmError::arg("no ratings"));
    }
    let skipped = ratings.iter().filter(|r| r.chosen_item().is_none()).count();
    let shared: Vec<String> = session
        .pairs
        .iter()
        .map(|p| p.pair_id.clone())
        .filter(|id| choices.values().all(|c| c.contains_key(id)))
        .collect();
    let category = |rater: &BTreeMap<String, String>, id: &str| -> &'static str {
        let pair = session.pair(id).expect("shared pairs exist");
        if rater[id] == pair.first {
            FIRST
        } else {
            SECOND
        }
    };
    let vectors: BTreeMap<&str, RatingVector> = choices
        .iter()
        .map(|(name, c)| {
            (name.as_str(), vector(&shared, shared.iter().map(|id| category(c, id))))
        })
        .collect();
    let raters: Vec<String> = choices.keys().cloned().collect();
    let mut entries = Vec::new();
    let kappa = |a: &RatingVector, b: &RatingVector| if shared.is_empty() { None } else { cohens_kappa(a, b).ok() };
    for (i, a) in raters.iter().enumerate() {
        for b in &raters[i + 1..] {
            let k = kappa(&vectors[a.as_str()], &vectors[b.as_str()]);
            entries.push(KappaEntry { a: a.clone(), b: b.clone(), kappa: k, pairs: shared.len() });
        }
    }
    for m in metrics {
        let cats = shared.iter().map(|id| metric_choice(session, m, id)).collect::<Result<Vec<_>>>()?;
        let mv = vector(&shared, cats);
        for r in &raters {
            let k = kappa(&mv, &vectors[r.as_str()]);
            entries.push(KappaEntry { a: m.name.clone(), b: r.clone(), kappa: k, pairs: shared.len() });
        }
    }
    Ok(KappaMatrix {
        raters,
        metrics: metrics.iter().map(|m| m.name.clone()).collect(),
        entries,
        shared_pairs: shared.len(),
        total_pairs: session.pairs.len(),
        skipped,
    })
}

/// Groups score-table rows into one metric per (measure, backbone).
pub fn metrics_from_rows(rows: &[super::report::ScoreRow]) -> Result<Vec<MetricScores>> {
    let mut grouped: BTreeMap<(String, String), MetricScores> = BTreeMap::new();
    for r in rows {
        let short = &r.backbone_hash[..r.backbone_hash.len().min(8)];
        let name = format!("MSM-{}-{short}", r.measure);
        let m = grouped
            .entry((r.measure.to_string(), r.backbone_hash.clone()))
            .or_insert_with(|| MetricScores { name, scores: BTreeMap::new() });
        let mut q = QualityScore::new(r.value, r.measure, r.backbone_hash.clone())?;
        q.orientation = r.orientation;
        if m.scores.insert(r.image_id.clone(), q).is_some() {
            return Err(MsmError::arg(format!("two scores for {} under {}", r.image_id, m.name)));
        }
    }
    Ok(grouped.into_values().collect())
}

pub fn run_report(config: &ExperimentConfig) -> Result<ReportBundle> {
    let spec = config.report.as_ref().ok_or_else(|| MsmError::arg("missing report section"))?;
    let session = PairSession::load(&spec.session)?;
    let ratings: Vec<RatingRecord> =
        read_ratings(&spec.ratings)?.into_iter().filter(|r| r.session_id == session.id).collect();
    let mut metrics = Vec::new();
    for path in &spec.scores {
        metrics.extend(metrics_from_rows(&read_scores(path)?)?);
    }
    let mut report = ReportBundle::new(ExperimentKind::Report, provenance(config)?);
    let k = kappa_report(&session, &ratings, &metrics)?;
    report.notes.push(format!("kappa over {} of {} pairs; {} skips", k.shared_pairs, k.total_pairs, k.skipped));
    report.kappa = Some(k);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pairs::{make_pair_session, ItemProvenance, SessionItem};
    use crate::harness::ratings::Choice;
    use crate::imaging::ImageGrid;
    use crate::metrics::DifferenceMeasure;

    fn session() -> PairSession {
        let items = (0..5)
            .map(|k| SessionItem {
                item_id: format!("i{k}"),
                group: "g".into(),
                image: ImageGrid::from_fn(8, 8, |y, x| ((y * 8 + x + 5 * k) % 31) as f64 / 31.0).unwrap(),
                provenance: ItemProvenance { method: format!("m{k}"), level: None },
            })
            .collect();
        make_pair_session(items, 4).unwrap().session
    }

    /// Rater preferring lower item index, answering in presentation terms.
    fn rate(s: &PairSession, rater: &str, flip: impl Fn(usize) -> bool) -> Vec<RatingRecord> {
        s.pairs
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let better = if (p.first < p.second) != flip(n) { &p.first } else { &p.second };
                RatingRecord {
                    session_id: s.id.clone(),
                    pair_id: p.pair_id.clone(),
                    rater: rater.into(),
                    choice: if *better == p.left { Choice::Left } else { Choice::Right },
                    left_item: p.left.clone(),
                    right_item: p.right.clone(),
                    timestamp_ms: 0,
                    elapsed_ms: 0,
                }
            })
            .collect()
    }

    #[test]
    fn identical_raters_agree_fully() {
        let s = session();
        let mut r = rate(&s, "ann", |_| false);
        r.extend(rate(&s, "bob", |_| false));
        let k = kappa_report(&s, &r, &[]).unwrap();
        assert_eq!(k.entries.len(), 1);
        assert_eq!(k.entries[0].kappa, Some(1.0));
        assert_eq!(k.shared_pairs, 10);
    }

    #[test]
    fn choices_are_derandomized() {
        let s = session();
        let r = rate(&s, "ann", |_| false);
        let c = item_choices(&s, &r).unwrap();
        for p in &s.pairs {
            assert_eq!(c["ann"][&p.pair_id], std::cmp::min(&p.first, &p.second).clone());
        }
    }

    #[test]
    fn metric_picks_the_better_oriented_item() {
        let s = session();
        let scores = |measure: DifferenceMeasure, f: fn(usize) -> f64| MetricScores {
            name: measure.to_string(),
            scores: (0..5).map(|k| (format!("i{k}"), QualityScore::new(f(k), measure, "h").unwrap())).collect(),
        };
        // Lower L2 is better: increasing values favour low indices, like the rater.
        let l2 = scores(DifferenceMeasure::L2, |k| k as f64);
        let psnr = scores(DifferenceMeasure::SPsnr, |k| k as f64);
        let k = kappa_report(&s, &rate(&s, "ann", |_| false), &[l2, psnr]).unwrap();
        assert_eq!(k.entries[0].kappa, Some(1.0));
        assert!(k.entries[1].kappa.unwrap() <= 0.0);
    }

    #[test]
    fn incomplete_raters_use_the_shared_subset() {
        let s = session();
        let mut r = rate(&s, "ann", |_| false);
        r.extend(rate(&s, "bob", |n| n == 0).into_iter().skip(1));
        r[3].choice = Choice::Skip;
        let k = kappa_report(&s, &r, &[]).unwrap();
        assert_eq!(k.shared_pairs, 8);
        assert_eq!(k.skipped, 1);
        assert_eq!(k.entries[0].kappa, Some(1.0));
    }

    #[test]
    fn mismatched_or_duplicate_records_rejected() {
        let s = session();
        let mut r = rate(&s, "ann", |_| false);
        let dup = r[0].clone();
        r.push(dup);
        assert!(kappa_report(&s, &r, &[]).is_err());
        let mut r = rate(&s, "ann", |_| false);
        let first = &mut r[0];
        std::mem::swap(&mut first.left_item, &mut first.right_item);
        assert!(kappa_report(&s, &r, &[]).is_err());
    }
}
