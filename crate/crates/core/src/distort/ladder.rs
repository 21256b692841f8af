use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistortionKind, DistortionSpec};
use crate::error::{MsmError, Result};
use crate::imaging::{save_image, ImageFormat, ImageGrid};

#[derive(Clone, Debug)]
pub struct Rung {
    pub spec: DistortionSpec,
    pub image: ImageGrid,
    pub level: f64,
}

/// Progressively degraded copies of one base image at known levels.
#[derive(Clone, Debug)]
pub struct DistortionLadder {
    pub base_hash: String,
    pub kind: DistortionKind,
    pub rungs: Vec<Rung>,
}

impl DistortionLadder {
    pub fn levels(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.level).collect()
    }
}

/// One distorted image per level; rung `i` uses seed `seed + i`.
pub fn build_ladder(image: &ImageGrid, kind: DistortionKind, levels: &[f64], seed: u64) -> Result<DistortionLadder> {
    if levels.is_empty() {
        return Err(MsmError::arg("ladder needs at least one level"));
    }
    if let Some(w) = levels.windows(2).find(|w| w[1] <= w[0]) {
        return Err(MsmError::arg(format!("ladder levels must be strictly ascending ({} then {})", w[0], w[1])));
    }
    let rungs = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let spec = DistortionSpec::new(kind, level, seed.wrapping_add(i as u64))?;
            let image = spec.apply(image)?;
            Ok(Rung { spec, image, level })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistortionLadder { base_hash: image.content_hash(), kind, rungs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderManifest {
    pub base_image_hash: String,
    pub kind: DistortionKind,
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

/// Writes every rung plus `manifest.json` into `dir`.
pub fn write_ladder(ladder: &DistortionLadder, dir: impl AsRef<Path>, format: ImageFormat) -> Result<LadderManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| MsmError::file(dir, e))?;
    let mut files = Vec::new();
    for (i, rung) in ladder.rungs.iter().enumerate() {
        let name = format!("{}_{i:02}.{}", ladder.kind, format.extension());
        save_image(&rung.image, dir.join(&name), format)?;
        files.push(name);
    }
    let manifest = LadderManifest {
        base_image_hash: ladder.base_hash.clone(),
        kind: ladder.kind,
        levels: ladder.levels(),
        seeds: ladder.rungs.iter().map(|r| r.spec.seed).collect(),
        files,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| MsmError::file(&path, e))?;
    Ok(manifest)
}
