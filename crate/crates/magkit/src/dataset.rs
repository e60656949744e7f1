//! Sample sources: directory datasets read from disk and synthetic faces
//! generated on demand, plus the synthetic dataset emitter.

use std::fs;
use std::path::{Path, PathBuf};

use magkit_core::data::{has_hat, synth_sample, Sample, SynthSpec};
use magkit_core::mask::RelationMatrices;

use crate::attributes::{read_attribute_table, write_attribute_table, AttributeTable};
use crate::error::{io, parse, Result};
use crate::imageio::{read_png, write_png};
use crate::masks::{read_masks, write_masks};
use crate::relations::write_relations;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const RELATIONS_FILE: &str = "relations.toml";
pub const MASK_EXT: &str = "mgm";

/// Seed of the synthetic training faces.
pub const SYNTH_TRAIN_SEED: u64 = 1;
/// Seed of the synthetic held-out faces used by evaluation.
pub const SYNTH_EVAL_SEED: u64 = 2;
/// Seed of the faces the evaluation classifier is fitted on.
pub const SYNTH_CLASSIFIER_SEED: u64 = 3;

/// Random access to labelled samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SynthSource {
    pub spec: SynthSpec,
    pub count: usize,
}

impl SampleSource for SynthSource {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(synth_sample(&self.spec, index as u64)?)
    }
}

/// One image with its mask file and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub labels: Vec<u8>,
}

/// A dataset directory, loaded lazily in file-name order.
#[derive(Clone, Debug)]
pub struct DirDataset {
    pub entries: Vec<Entry>,
    pub resolution: usize,
}

impl DirDataset {
    /// Lists the images named by the attribute table, sorted by file name.
    /// Images without a mask file are skipped with a warning.
    pub fn open(image_dir: &Path, table: &Path, mask_dir: &Path, subset: &[String], resolution: usize) -> Result<Self> {
        let t = read_attribute_table(table)?;
        let cols = t.columns(subset, table)?;
        let mut rows: Vec<&(String, Vec<u8>)> = t.rows.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries = Vec::with_capacity(rows.len());
        for (file, labels) in rows {
            let image = image_dir.join(file);
            let stem = Path::new(file).file_stem().ok_or_else(|| parse(table, None, format!("bad file name {file:?}")))?;
            let mask = mask_dir.join(stem).with_extension(MASK_EXT);
            if !mask.is_file() {
                log::warn!("skipping {}: no mask at {}", image.display(), mask.display());
                continue;
            }
            entries.push(Entry { image, mask, labels: cols.iter().map(|c| labels[*c]).collect() });
        }
        Ok(Self { entries, resolution })
    }

    /// The standard layout: `images/`, `masks/` and `attributes.csv` under
    /// `root`.
    pub fn open_root(root: &Path, subset: &[String], resolution: usize) -> Result<Self> {
        Self::open(&root.join(IMAGES_DIR), &root.join(ATTRIBUTES_FILE), &root.join(MASKS_DIR), subset, resolution)
    }

    /// Entries `start..start + len`, clamped to the dataset.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let start = start.min(self.entries.len());
        let end = (start + len).min(self.entries.len());
        Self { entries: self.entries[start..end].to_vec(), resolution: self.resolution }
    }
}

impl SampleSource for DirDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let image = read_png(&e.image, self.resolution)?;
        let mut parts = read_masks(&e.mask)?;
        if parts.height() != self.resolution || parts.width() != self.resolution {
            parts = parts.resized(self.resolution, self.resolution)?;
        }
        Ok(Sample { image, att_s: e.labels.clone(), has_hat: has_hat(&parts), parts })
    }
}

/// Loads every sample of a directory dataset.
pub fn load_dataset(image_dir: &Path, table: &Path, mask_dir: &Path, subset: &[String], resolution: usize) -> Result<Vec<Sample>> {
    let ds = DirDataset::open(image_dir, table, mask_dir, subset, resolution)?;
    (0..ds.len()).map(|i| ds.get(i)).collect()
}

/// Writes `n` synthetic faces in the directory layout, with the default
/// relation table.
pub fn emit_synthetic(root: &Path, spec: &SynthSpec, n: usize) -> Result<()> {
    if n == 0 {
        return Err(magkit_core::Error::Empty("synthetic dataset").into());
    }
    let images = root.join(IMAGES_DIR);
    let masks = root.join(MASKS_DIR);
    fs::create_dir_all(&images).map_err(io(&images))?;
    fs::create_dir_all(&masks).map_err(io(&masks))?;
    let width = n.to_string().len().max(6);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(spec, i as u64)?;
        let stem = format!("{i:0width$}");
        write_png(&images.join(format!("{stem}.png")), &s.image)?;
        write_masks(&masks.join(format!("{stem}.{MASK_EXT}")), &s.parts)?;
        rows.push((format!("{stem}.png"), s.att_s));
    }
    write_attribute_table(&root.join(ATTRIBUTES_FILE), &AttributeTable { names: spec.attributes.clone(), rows })?;
    let rel = RelationMatrices::synthetic_default().select(&spec.attributes)?;
    write_relations(&root.join(RELATIONS_FILE), &rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_datasets_load_back_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(16, 9);
        emit_synthetic(dir.path(), &spec, 4).unwrap();
        let names = spec.attributes.clone();
        let ds = DirDataset::open_root(dir.path(), &names, 16).unwrap();
        assert_eq!(ds.len(), 4);
        for i in 0..4 {
            let a = ds.get(i).unwrap();
            let b = synth_sample(&spec, i as u64).unwrap();
            assert_eq!(a.att_s, b.att_s);
            assert_eq!(a.has_hat, b.has_hat);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 1.0 / 127.5);
            }
        }
        let again = load_dataset(&dir.path().join(IMAGES_DIR), &dir.path().join(ATTRIBUTES_FILE), &dir.path().join(MASKS_DIR), &names, 16).unwrap();
        assert_eq!(again.len(), 4);
        assert_eq!(again[2].att_s, ds.get(2).unwrap().att_s);
    }

    #[test]
    fn missing_masks_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        emit_synthetic(dir.path(), &SynthSpec::new(8, 1), 3).unwrap();
        fs::remove_file(dir.path().join(MASKS_DIR).join("000001.mgm")).unwrap();
        let ds = DirDataset::open_root(dir.path(), &["Bald".to_string()], 8).unwrap();
        let names: Vec<_> = ds.entries.iter().map(|e| e.image.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["000000.png", "000002.png"]);
        assert_eq!(ds.entries[0].labels.len(), 1);
    }

    #[test]
    fn subset_must_be_non_empty_and_known() {
        let dir = tempfile::tempdir().unwrap();
        emit_synthetic(dir.path(), &SynthSpec::new(8, 1), 1).unwrap();
        assert!(DirDataset::open_root(dir.path(), &[], 8).is_err());
        assert!(DirDataset::open_root(dir.path(), &["Smiling".to_string()], 8).is_err());
    }
}
