#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use msm::harness::{Choice, PairSession, RatingRecord, RatingStore};

pub const BIN: &str = env!("CARGO_BIN_EXE_msm");

pub const EXPERIMENTS: [&str; 4] = ["correlate", "ablate", "sweep", "pairs"];

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/configs").join(format!("{name}.json"))
}

pub fn msm(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(BIN).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "msm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Runs `msm <sub> --config <config> --deterministic` twice into
/// `<dir>/<sub>-a` and `<dir>/<sub>-b`; returns both report.json files.
pub fn run_twice(dir: &Path, sub: &str, config: &Path) -> (Vec<u8>, Vec<u8>) {
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("{sub}-{run}"));
        msm(&[sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"], dir);
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    (reports.remove(0), reports.remove(0))
}

/// Two raters over every pair of the session in `sessions`; writes
/// `<dir>/report.json` as a report config and returns its path.
pub fn rate_and_configure_report(dir: &Path, sessions: &Path) -> (PathBuf, PairSession) {
    let session_file = std::fs::read_dir(sessions)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "json"))
        .unwrap();
    let session = PairSession::load(&session_file).unwrap();
    let ratings = dir.join("ratings.jsonl");
    let mut store = RatingStore::open(&ratings).unwrap();
    for (i, p) in session.pairs.iter().enumerate() {
        for rater in ["ann", "bob"] {
            let choice = if (i + rater.len()) % 3 == 0 { Choice::Right } else { Choice::Left };
            store
                .append(RatingRecord {
                    session_id: session.id.clone(),
                    pair_id: p.pair_id.clone(),
                    rater: rater.into(),
                    choice,
                    left_item: p.left.clone(),
                    right_item: p.right.clone(),
                    timestamp_ms: 0,
                    elapsed_ms: 0,
                })
                .unwrap();
        }
    }
    let config = dir.join("report-config.json");
    let text = serde_json::json!({ "seed": 1, "report": { "session": session_file, "ratings": ratings } });
    std::fs::write(&config, text.to_string()).unwrap();
    (config, session)
}
