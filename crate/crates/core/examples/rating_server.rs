//! Writes a small pair session to a temp directory and serves it.
//!
//! cargo run --example rating_server
//! curl 'http://127.0.0.1:8080/api/sessions'

use std::sync::Arc;

use msm::harness::{make_pair_session, serve, ItemProvenance, ServerState, SessionItem};
use msm::imaging::phantom_set;

fn main() -> msm::error::Result<()> {
    let dir = std::env::temp_dir().join("msm-rating-example");
    let items = phantom_set(100, 4, 64)?
        .into_iter()
        .enumerate()
        .map(|(k, image)| SessionItem {
            item_id: format!("item{k}"),
            group: "demo".into(),
            image,
            provenance: ItemProvenance { method: format!("phantom-{k}"), level: None },
        })
        .collect();
    let bundle = make_pair_session(items, 1)?;
    bundle.write(&dir)?;
    let state = Arc::new(ServerState::load(&dir, dir.join("ratings.jsonl"), &[])?);
    let addr = "127.0.0.1:8080".parse().expect("static address");
    println!("session {} in {}; serving on http://{addr}", bundle.session.id, dir.display());
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))
}
