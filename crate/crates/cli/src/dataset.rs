//! On-disk phantom datasets: svol image/label pairs plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tta_core::volume::{preprocess, preprocess_labels, read_svol_labels, read_svol_volume, write_svol, Case, SvolData};

use crate::phantom::{generate, PhantomCase, PhantomSpec, Split};

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub cases: Vec<CaseEntry>,
}

/// Resamples a raw phantom onto the `grid^3` network grid.
pub fn to_case(p: &PhantomCase, grid: usize) -> Result<Case> {
    Ok(Case {
        id: p.id.clone(),
        image: preprocess(&p.image, grid)?,
        labels: Some(preprocess_labels(&p.labels, grid)?),
    })
}

pub fn write_dataset(dir: &Path, spec: &PhantomSpec, seed: u64) -> Result<DatasetManifest> {
    let mut cases = Vec::new();
    for case in generate(spec, seed) {
        let sub = dir.join(case.split.name());
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        let image = format!("{}/{}_image.svol", case.split.name(), case.id);
        let labels = format!("{}/{}_labels.svol", case.split.name(), case.id);
        write_svol(dir.join(&image), &SvolData::Volume(case.image))?;
        write_svol(dir.join(&labels), &SvolData::Labels(case.labels))?;
        cases.push(CaseEntry {
            id: case.id,
            split: case.split,
            image,
            labels,
        });
    }
    let manifest = DatasetManifest {
        seed,
        phantom: spec.clone(),
        cases,
    };
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Input files of one split, in manifest order.
pub fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    Ok(manifest
        .cases
        .iter()
        .filter(|c| c.split == split)
        .flat_map(|c| [dir.join(&c.image), dir.join(&c.labels)])
        .collect())
}

/// Loads and preprocesses every case of `split`.
pub fn load_split(dir: &Path, split: Split, grid: usize) -> Result<Vec<Case>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::new();
    for entry in manifest.cases.iter().filter(|c| c.split == split) {
        let image = read_svol_volume(dir.join(&entry.image))?;
        let labels = read_svol_labels(dir.join(&entry.labels))?;
        out.push(Case {
            id: entry.id.clone(),
            image: preprocess(&image, grid)?,
            labels: Some(preprocess_labels(&labels, grid)?),
        });
    }
    if out.is_empty() {
        bail!("{} has no {} cases", dir.display(), split.name());
    }
    Ok(out)
}
