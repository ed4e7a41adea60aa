//! On-disk dataset layout:
//!
//! ```text
//! dataset.json      generator spec and training channel means
//! taxonomy.json     class tree
//! train/manifest.json, train/NNNNN.ppm
//! test/manifest.json,  test/NNNNN.ppm
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::io::pnm::{read_ppm, write_ppm};
use crate::metrics::{Taxonomy, TaxonomyNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SyntheticDatasetSpec,
    pub channel_means: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub class: String,
}

pub fn taxonomy_to_json(tax: &Taxonomy) -> String {
    let mut s = serde_json::to_string_pretty(tax.root()).expect("taxonomy serializes");
    s.push('\n');
    s
}

pub fn taxonomy_from_json(text: &str) -> Result<Taxonomy> {
    let root: TaxonomyNode =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("taxonomy: {e}")))?;
    Taxonomy::new(root)
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    taxonomy_from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_dataset(dir: &Path, spec: &SyntheticDatasetSpec, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("dataset.json"),
        &DatasetInfo {
            spec: spec.clone(),
            channel_means: dataset.channel_means,
        },
    )?;
    let tax_path = dir.join("taxonomy.json");
    std::fs::write(&tax_path, taxonomy_to_json(&dataset.taxonomy))
        .map_err(|e| Error::io(&tax_path, e))?;
    let names = dataset.taxonomy.class_names();
    for (name, split) in [("train", &dataset.train), ("test", &dataset.test)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut manifest = Vec::with_capacity(split.len());
        for (i, (image, &label)) in split.images.iter().zip(&split.labels).enumerate() {
            let file = format!("{i:05}.ppm");
            write_ppm(&sub.join(&file), image)?;
            manifest.push(ManifestEntry {
                file,
                label,
                class: names[label].to_string(),
            });
        }
        write_json(&sub.join("manifest.json"), &manifest)?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, name: &str) -> Result<Split> {
    let sub = dir.join(name);
    let manifest: Vec<ManifestEntry> = read_json(&sub.join("manifest.json"))?;
    let mut split = Split::default();
    for entry in manifest {
        split.images.push(read_ppm(&sub.join(&entry.file))?);
        split.labels.push(entry.label);
    }
    Ok(split)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
    Ok(Dataset {
        taxonomy: read_taxonomy(&dir.join("taxonomy.json"))?,
        train: load_split(dir, "train")?,
        test: load_split(dir, "test")?,
        channel_means: info.channel_means,
    })
}

pub fn read_dataset_info(dir: &Path) -> Result<DatasetInfo> {
    read_json(&dir.join("dataset.json"))
}
