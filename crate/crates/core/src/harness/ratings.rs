use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    /// Recorded but excluded from agreement statistics.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub pair_id: String,
    pub rater: String,
    pub choice: Choice,
    pub left_item: String,
    pub right_item: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub elapsed_ms: u64,
}

impl RatingRecord {
    /// The chosen item, `None` for skips.
    pub fn chosen_item(&self) -> Option<&str> {
        match self.choice {
            Choice::Left => Some(&self.left_item),
            Choice::Right => Some(&self.right_item),
            Choice::Skip => None,
        }
    }

    fn key(&self) -> (String, String, String) {
        (self.session_id.clone(), self.rater.clone(), self.pair_id.clone())
    }
}

/// Append-only JSONL store with one record per (session, rater, pair).
/// Every append is synced to disk before it is acknowledged.
#[derive(Debug)]
pub struct RatingStore {
    path: PathBuf,
    file: File,
    keys: HashSet<(String, String, String)>,
    records: Vec<RatingRecord>,
}

impl RatingStore {
    /// Opens (or creates) the store and replays existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() { read_ratings(&path)? } else { Vec::new() };
        let mut keys = HashSet::new();
        for r in &records {
            if !keys.insert(r.key()) {
                return Err(MsmError::arg(format!(
                    "{} holds two ratings of pair {} by {}",
                    path.display(),
                    r.pair_id,
                    r.rater
                )));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| MsmError::file(&path, e))?;
        Ok(Self { path, file, keys, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn contains(&self, session_id: &str, rater: &str, pair_id: &str) -> bool {
        self.keys.contains(&(session_id.to_string(), rater.to_string(), pair_id.to_string()))
    }

    /// Rejects a second rating of the same pair by the same rater with
    /// [`MsmError::Conflict`], leaving the store untouched.
    pub fn append(&mut self, record: RatingRecord) -> Result<()> {
        if self.keys.contains(&record.key()) {
            return Err(MsmError::Conflict(format!("{} already rated {}", record.rater, record.pair_id)));
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| MsmError::file(&self.path, e))?;
        self.file.sync_data().map_err(|e| MsmError::file(&self.path, e))?;
        self.keys.insert(record.key());
        self.records.push(record);
        Ok(())
    }
}

pub fn read_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| MsmError::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MsmError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| MsmError::arg(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rater: &str, pair: &str, choice: Choice) -> RatingRecord {
        RatingRecord {
            session_id: "s1".into(),
            pair_id: pair.into(),
            rater: rater.into(),
            choice,
            left_item: "a".into(),
            right_item: "b".into(),
            timestamp_ms: 1,
            elapsed_ms: 700,
        }
    }

    #[test]
    fn duplicates_rejected_and_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        {
            let mut s = RatingStore::open(&path).unwrap();
            s.append(rec("ann", "p0", Choice::Left)).unwrap();
            s.append(rec("bob", "p0", Choice::Right)).unwrap();
            assert!(matches!(s.append(rec("ann", "p0", Choice::Right)), Err(MsmError::Conflict(_))));
            assert_eq!(s.records().len(), 2);
        }
        let before = std::fs::read(&path).unwrap();
        let mut s = RatingStore::open(&path).unwrap();
        assert_eq!(s.records().len(), 2);
        assert!(s.contains("s1", "ann", "p0"));
        assert!(s.append(rec("ann", "p0", Choice::Left)).is_err());
        assert_eq!(std::fs::read(&path).unwrap(), before);
        s.append(rec("ann", "p1", Choice::Skip)).unwrap();
        assert_eq!(read_ratings(&path).unwrap().len(), 3);
    }

    #[test]
    fn chosen_item_follows_presentation() {
        assert_eq!(rec("a", "p", Choice::Left).chosen_item(), Some("a"));
        assert_eq!(rec("a", "p", Choice::Right).chosen_item(), Some("b"));
        assert_eq!(rec("a", "p", Choice::Skip).chosen_item(), None);
    }

    #[test]
    fn corrupt_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, "{\"oops\": 1}\n").unwrap();
        assert!(RatingStore::open(&path).is_err());
    }
}
