//! File formats: pixmaps, weight files, datasets, explanation records and
//! result tables.

mod dataset;
mod pnm;
mod table;
mod weights;

use std::path::Path;

pub use dataset::{
    load_dataset, load_split, read_dataset_info, read_taxonomy, save_dataset, taxonomy_from_json,
    taxonomy_to_json, DatasetInfo, ManifestEntry,
};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_ppm, write_ppm};
pub use table::{
    rows_from_csv, rows_to_csv, series_for_metric, svg_lineplot, write_csv, write_svg, PlotSpec,
    Series, CSV_HEADER,
};
pub use weights::{
    decode_model, decode_tensors, encode_model, encode_tensors, load_model, save_model, MAGIC,
    META_TENSOR, VERSION,
};

use crate::attribution::Explanation;
use crate::error::{Error, Result};

pub fn explanations_to_json(explanations: &[Explanation]) -> String {
    let mut s = serde_json::to_string_pretty(explanations).expect("explanations serialize");
    s.push('\n');
    s
}

pub fn explanations_from_json(text: &str) -> Result<Vec<Explanation>> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("explanations: {e}")))
}

pub fn write_explanations(path: &Path, explanations: &[Explanation]) -> Result<()> {
    std::fs::write(path, explanations_to_json(explanations)).map_err(|e| Error::io(path, e))
}

pub fn read_explanations(path: &Path) -> Result<Vec<Explanation>> {
    explanations_from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
