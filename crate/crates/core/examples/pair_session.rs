//! Builds a blinded pair session from denoised variants of one slice,
//! simulates two raters, and prints the kappa report.

use msm::denoise::DenoiserModel;
use msm::distort::{gaussian_field, synthesize_sodium};
use msm::harness::{kappa_report, make_pair_session, Choice, ItemProvenance, RatingRecord, SessionItem};
use msm::imaging::phantom_set;

fn main() -> msm::error::Result<()> {
    let clean = phantom_set(42, 1, 64)?.remove(0);
    let noisy = synthesize_sodium(&clean, &gaussian_field(&clean, 0.1, 1)?)?;
    let mut items = vec![SessionItem {
        item_id: "item0".into(),
        group: "slice".into(),
        image: noisy.clone(),
        provenance: ItemProvenance { method: "noisy".into(), level: Some(0.1) },
    }];
    for (k, w) in [3, 5, 7].into_iter().enumerate() {
        items.push(SessionItem {
            item_id: format!("item{}", k + 1),
            group: "slice".into(),
            image: DenoiserModel::median(w)?.apply(&noisy)?,
            provenance: ItemProvenance { method: format!("median-{w}"), level: None },
        });
    }
    let bundle = make_pair_session(items, 7)?;
    let session = &bundle.session;
    println!("session {} with {} pairs", session.id, session.pairs.len());
    println!("first view: {:?}", session.view(&session.pairs[0]));

    let mut ratings = Vec::new();
    for (i, p) in session.pairs.iter().enumerate() {
        for rater in ["ann", "bob"] {
            let choice = if i % 4 == 0 && rater == "bob" { Choice::Right } else { Choice::Left };
            ratings.push(RatingRecord {
                session_id: session.id.clone(),
                pair_id: p.pair_id.clone(),
                rater: rater.into(),
                choice,
                left_item: p.left.clone(),
                right_item: p.right.clone(),
                timestamp_ms: 0,
                elapsed_ms: 1200,
            });
        }
    }
    let report = kappa_report(session, &ratings, &[])?;
    for e in &report.entries {
        println!("{} vs {}: kappa {:?} over {} pairs", e.a, e.b, e.kappa, e.pairs);
    }
    Ok(())
}
