use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::Digest as _;

use super::config::{DatasetSource, ExperimentConfig, ExperimentKind, PairsSpec};
use super::experiments::provenance;
use super::report::ReportBundle;
use crate::backbone::dataset_hash;
use crate::denoise::{sodium_pairs, train_sodium_denoiser, DenoiserModel};
use crate::distort::{gaussian_field, synthesize_sodium};
use crate::error::{MsmError, Result};
use crate::imaging::{save_image, ImageFormat, ImageGrid};
use crate::rng;

const SESSION_FORMAT: &str = "msm-pair-session";

/// How an item was made. Kept server-side only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemProvenance {
    pub method: String,
    pub level: Option<f64>,
}

/// Input to [`make_pair_session`].
#[derive(Clone, Debug)]
pub struct SessionItem {
    pub item_id: String,
    /// Items are only compared within their group (e.g. one slice).
    pub group: String,
    pub image: ImageGrid,
    pub provenance: ItemProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredItem {
    pub item_id: String,
    pub group: String,
    pub image_hash: String,
    pub provenance: ItemProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPair {
    pub pair_id: String,
    /// Canonical order, used for kappa categories.
    pub first: String,
    pub second: String,
    /// Presentation order.
    pub left: String,
    pub right: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSession {
    pub format: String,
    pub id: String,
    pub seed: u64,
    pub items: Vec<StoredItem>,
    pub pairs: Vec<SessionPair>,
}

/// What a rater's client sees for one pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_id: String,
    pub left_image_url: String,
    pub right_image_url: String,
}

pub fn image_url(hash: &str) -> String {
    format!("/images/{hash}.png")
}

impl PairSession {
    pub fn item(&self, item_id: &str) -> Option<&StoredItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn pair(&self, pair_id: &str) -> Option<&SessionPair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn view(&self, pair: &SessionPair) -> PairView {
        let url = |id: &str| image_url(&self.item(id).expect("pair items exist").image_hash);
        PairView { pair_id: pair.pair_id.clone(), left_image_url: url(&pair.left), right_image_url: url(&pair.right) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsmError::file(path, e))?;
        let s: Self = serde_json::from_str(&text)
            .map_err(|e| MsmError::arg(format!("corrupt session file {}: {e}", path.display())))?;
        if s.format != SESSION_FORMAT {
            return Err(MsmError::arg(format!("{} is not a pair session", path.display())));
        }
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if self.item(&p.first).is_none() || self.item(&p.second).is_none() {
                return Err(MsmError::arg(format!("pair {} references unknown items", p.pair_id)));
            }
            let key = if p.first < p.second { (&p.first, &p.second) } else { (&p.second, &p.first) };
            if !seen.insert(key) {
                return Err(MsmError::arg(format!("pair {} repeats an image pair", p.pair_id)));
            }
        }
        Ok(())
    }
}

/// A session plus the images it refers to, keyed by content hash.
#[derive(Clone, Debug)]
pub struct SessionBundle {
    pub session: PairSession,
    pub images: BTreeMap<String, ImageGrid>,
}

impl SessionBundle {
    /// Writes `<id>.json` and `images/<hash>.png` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| MsmError::file(&images, e))?;
        for (hash, img) in &self.images {
            save_image(img, images.join(format!("{hash}.png")), ImageFormat::Png16)?;
        }
        let path = dir.join(format!("{}.json", self.session.id));
        let text = serde_json::to_string_pretty(&self.session)? + "\n";
        std::fs::write(&path, text).map_err(|e| MsmError::file(&path, e))
    }
}

/// Enumerates every unordered within-group pair, shuffles the pair order
/// and flips a coin per pair for the left/right presentation.
///
/// Images are addressed by a hash of their 16-bit PNG encoding, which is
/// what the server ships to clients.
pub fn make_pair_session(items: Vec<SessionItem>, seed: u64) -> Result<SessionBundle> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(&it.group).or_default().push(i);
    }
    if let Some((g, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(MsmError::arg(format!("group {g:?} has fewer than two items")));
    }
    let ids: BTreeSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    if ids.len() != items.len() {
        return Err(MsmError::arg("duplicate item ids"));
    }
    let mut stored = Vec::with_capacity(items.len());
    let mut images = BTreeMap::new();
    for it in &items {
        let png = crate::imaging::encode_image(&it.image, ImageFormat::Png16)?;
        let image_hash = hex::encode(sha2::Sha256::digest(&png));
        if images.insert(image_hash.clone(), it.image.clone()).is_some() {
            return Err(MsmError::arg(format!("item {} duplicates another item's image", it.item_id)));
        }
        stored.push(StoredItem {
            item_id: it.item_id.clone(),
            group: it.group.clone(),
            image_hash,
            provenance: it.provenance.clone(),
        });
    }
    let mut raw: Vec<(usize, usize)> = Vec::new();
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                raw.push((i, j));
            }
        }
    }
    rng::shuffle(&mut raw, &mut rng::substream(seed, 1));
    let mut sides = rng::substream(seed, 2);
    let mut h = sha2::Sha256::new();
    h.update(seed.to_le_bytes());
    for s in &stored {
        h.update(s.image_hash.as_bytes());
    }
    let id = format!("s{}", &hex::encode(h.finalize())[..12]);
    let pairs = raw
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| {
            let (first, second) = (stored[i].item_id.clone(), stored[j].item_id.clone());
            let (left, right) = if sides.gen_bool(0.5) { (first.clone(), second.clone()) } else { (second.clone(), first.clone()) };
            SessionPair { pair_id: format!("p{k:04}"), first, second, left, right }
        })
        .collect();
    let session = PairSession { format: SESSION_FORMAT.into(), id, seed, items: stored, pairs };
    Ok(SessionBundle { session, images })
}


/// Trains the configured denoisers, denoises synthetic sodium slices and
/// builds a blinded session over the variants of each slice.
pub fn run_pairs_experiment(config: &ExperimentConfig) -> Result<(ReportBundle, SessionBundle)> {
    let spec: &PairsSpec = config.pairs.as_ref().ok_or_else(|| MsmError::arg("missing pairs section"))?;
    let mut report = ReportBundle::new(ExperimentKind::Pairs, provenance(config)?);
    let slices = spec.slices.load()?;
    let train_src = config.train_set.clone().unwrap_or(DatasetSource::phantoms(0, 64, slices[0].height()));
    let needs_training = spec.denoisers.iter().any(|d| d.is_learned());
    let mut models = Vec::new();
    if needs_training {
        let clean = train_src.load()?;
        report.provenance.datasets.insert("denoiser-training".into(), dataset_hash(&clean));
        let pairs = sodium_pairs(&clean, spec.training_noise, rng::splitmix_pair(config.seed, 7))?;
        for arch in &spec.denoisers {
            let model = if arch.is_learned() {
                let hyper = crate::backbone::TrainingHyper { seed: spec.denoiser_hyper.seed ^ config.seed, ..spec.denoiser_hyper.clone() };
                train_sodium_denoiser(arch, &pairs, &hyper)?
            } else {
                DenoiserModel::build(arch, 0)?
            };
            models.push(model);
        }
    } else {
        for arch in &spec.denoisers {
            models.push(DenoiserModel::build(arch, 0)?);
        }
    }
    for m in &models {
        report.provenance.models.insert(m.arch().name().to_string(), m.model_hash());
    }
    report.provenance.datasets.insert("slices".into(), dataset_hash(&slices));
    let mut items = Vec::new();
    for (s, slice) in slices.iter().enumerate() {
        let field = gaussian_field(slice, spec.noise_sigma, rng::splitmix_pair(config.seed, 100 + s as u64))?;
        let noisy = synthesize_sodium(slice, &field)?;
        let group = format!("slice{s:03}");
        let level = Some(spec.noise_sigma);
        if spec.include_noisy {
            items.push((group.clone(), noisy.clone(), ItemProvenance { method: "noisy".into(), level }));
        }
        for m in &models {
            items.push((group.clone(), m.apply(&noisy)?, ItemProvenance { method: m.arch().name().into(), level }));
        }
    }
    // Opaque item ids: numbering follows a seeded permutation.
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng::shuffle(&mut order, &mut rng::substream(config.seed, 3));
    let mut numbered: Vec<Option<SessionItem>> = vec![None; items.len()];
    for (k, &i) in order.iter().enumerate() {
        let (group, image, provenance) = items[i].clone();
        numbered[i] = Some(SessionItem { item_id: format!("item{k:03}"), group, image, provenance });
    }
    let bundle = make_pair_session(numbered.into_iter().flatten().collect(), config.seed)?;
    report.notes.push(format!(
        "session {}: {} items, {} pairs",
        bundle.session.id,
        bundle.session.items.len(),
        bundle.session.pairs.len()
    ));
    Ok((report, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn items(groups: usize, per: usize) -> Vec<SessionItem> {
        let mut out = Vec::new();
        for g in 0..groups {
            for k in 0..per {
                let tag = (g * per + k + 1) as f64 / (groups * per + 1) as f64;
                let image =
                    ImageGrid::from_fn(8, 8, |y, x| if y + x == 0 { tag } else { ((y * 8 + x + 7 * k) % 97) as f64 / 97.0 })
                        .unwrap();
                out.push(SessionItem {
                    item_id: format!("g{g}k{k}"),
                    group: format!("g{g}"),
                    image,
                    provenance: ItemProvenance { method: format!("method-{k}"), level: Some(0.1) },
                });
            }
        }
        out
    }

    #[test]
    fn five_variants_give_ten_pairs() {
        let b = make_pair_session(items(1, 5), 1).unwrap();
        assert_eq!(b.session.pairs.len(), 10);
        let two = make_pair_session(items(1, 2), 1).unwrap();
        assert_eq!(two.session.pairs.len(), 1);
        assert!(make_pair_session(items(1, 1), 1).is_err());
    }

    #[test]
    fn pairs_stay_within_groups_and_are_unique() {
        let b = make_pair_session(items(3, 4), 9).unwrap();
        assert_eq!(b.session.pairs.len(), 18);
        for p in &b.session.pairs {
            assert_eq!(b.session.item(&p.first).unwrap().group, b.session.item(&p.second).unwrap().group);
            assert!((p.left == p.first && p.right == p.second) || (p.left == p.second && p.right == p.first));
        }
        b.session.check().unwrap();
        assert_eq!(make_pair_session(items(3, 4), 9).unwrap().session, b.session);
    }

    #[test]
    fn side_assignment_is_balanced() {
        let b = make_pair_session(items(10, 7), 2024).unwrap();
        let n = b.session.pairs.len();
        assert_eq!(n, 210);
        let first_left = b.session.pairs[..200].iter().filter(|p| p.left == p.first).count();
        assert!((80..=120).contains(&first_left), "{first_left}");
    }

    #[test]
    fn views_carry_no_provenance() {
        let b = make_pair_session(items(2, 5), 3).unwrap();
        for p in &b.session.pairs {
            let json = serde_json::to_string(&b.session.view(p)).unwrap();
            assert!(!json.contains("method") && !json.contains("0.1") && !json.contains("g0"));
        }
    }

    #[test]
    fn session_file_round_trip() {
        let b = make_pair_session(items(1, 3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let back = PairSession::load(dir.path().join(format!("{}.json", b.session.id))).unwrap();
        assert_eq!(back, b.session);
        for item in &back.items {
            assert!(dir.path().join("images").join(format!("{}.png", item.image_hash)).exists());
        }
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        assert!(PairSession::load(&bad).is_err());
    }
}
