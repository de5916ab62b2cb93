//! On-disk datasets: 16-bit PNG pairs plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/hq/00000.png
//! <dir>/lq/00000.png
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sr_distill_core::degradation::{
    make_pairs, synth_hq, DegradationRecipe, SynthImage, TrainingPair,
};

use crate::error::{Result, ToolError};
use crate::files::{create_dir, read_json, write_json};
use crate::manifest::RunInfo;
use crate::pngio::{read_png, write_png16};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub hq: String,
    pub lq: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: usize,
    pub seed: u64,
    pub recipe: DegradationRecipe,
    pub items: Vec<DatasetItem>,
    pub run: RunInfo,
}

/// A loaded dataset split into training and validation pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<(String, TrainingPair)>,
    pub val: Vec<(String, TrainingPair)>,
}

impl Dataset {
    pub fn train_pairs(&self) -> Vec<TrainingPair> {
        self.train.iter().map(|(_, p)| p.clone()).collect()
    }

    pub fn val_pairs(&self) -> Vec<TrainingPair> {
        self.val.iter().map(|(_, p)| p.clone()).collect()
    }

    pub fn hq(pairs: &[(String, TrainingPair)]) -> Vec<SynthImage> {
        pairs
            .iter()
            .map(|(_, p)| SynthImage {
                image: p.hq.clone(),
                class_id: p.class_id,
            })
            .collect()
    }
}

/// Generates `n` training and `val` validation pairs. Validation images are
/// the last `val` indices of one generated sequence.
pub fn generate(
    n: usize,
    val: usize,
    size: usize,
    seed: u64,
    recipe: &DegradationRecipe,
) -> Result<Vec<TrainingPair>> {
    if n == 0 {
        return Err(ToolError::Args("--n must be >= 1".into()));
    }
    let hq = synth_hq(n + val, size, seed)?;
    Ok(make_pairs(&hq, recipe, seed)?)
}

pub fn write_dataset(
    dir: &Path,
    n: usize,
    val: usize,
    size: usize,
    seed: u64,
    recipe: &DegradationRecipe,
    run: RunInfo,
) -> Result<DatasetManifest> {
    let pairs = generate(n, val, size, seed, recipe)?;
    create_dir(&dir.join("hq"))?;
    create_dir(&dir.join("lq"))?;
    let mut items = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("{i:05}");
        let item = DatasetItem {
            hq: format!("hq/{id}.png"),
            lq: format!("lq/{id}.png"),
            split: if i < n { Split::Train } else { Split::Val },
            class_id: p.class_id,
            id,
        };
        write_png16(&dir.join(&item.hq), &p.hq)?;
        write_png16(&dir.join(&item.lq), &p.lq)?;
        items.push(item);
    }
    let manifest = DatasetManifest {
        size,
        seed,
        recipe: recipe.clone(),
        items,
        run,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(ToolError::MissingPrerequisite(format!(
            "no dataset manifest at {}",
            path.display()
        )));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for item in &manifest.items {
        let pair = TrainingPair {
            lq: read_png(&dir.join(&item.lq))?,
            hq: read_png(&dir.join(&item.hq))?,
            class_id: item.class_id,
        };
        match item.split {
            Split::Train => train.push((item.id.clone(), pair)),
            Split::Val => val.push((item.id.clone(), pair)),
        }
    }
    Ok(Dataset {
        manifest,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = DegradationRecipe::default();
        let m = write_dataset(dir.path(), 3, 2, 16, 7, &recipe, RunInfo::new("test", 7)).unwrap();
        assert_eq!(m.items.len(), 5);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (3, 2));
        assert_eq!(ds.manifest.recipe, recipe);
        let direct = generate(3, 2, 16, 7, &recipe).unwrap();
        let (_, p) = &ds.val[1];
        assert_eq!((p.lq.height(), p.hq.height()), (4, 16));
        let err =
            p.hq.data()
                .iter()
                .zip(direct[4].hq.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
        assert!(err < 1e-5);
    }

    #[test]
    fn missing_manifest_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(ToolError::MissingPrerequisite(_))
        ));
    }
}
