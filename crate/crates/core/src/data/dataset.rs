//! Directory layout:
//!
//! ```text
//! root/images/<id>.png
//! root/masks_disc/<id>.png
//! root/masks_cup/<id>.png
//! root/labels.csv          optional: image_id,cdr,grade[,...]
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::csv_error;
use super::{gray_to_mask, read_gray, read_rgb, rgb_to_tensor, tensor_to_rgb, write_png_mask, write_png_rgb, SegPair};
use crate::error::{Error, Result};
use crate::eval::Grade;

pub const LABELS_FILE: &str = "labels.csv";
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub cdr: Option<f64>,
    pub grade: Option<Grade>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub disc: PathBuf,
    pub cup: PathBuf,
    pub label: Option<Label>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Lexicographic by image file name.
    pub entries: Vec<Entry>,
    pub seed: u64,
}

#[derive(Deserialize)]
struct LabelRow {
    image_id: String,
    cdr: Option<f64>,
    grade: Option<String>,
}

fn read_labels(path: &Path) -> Result<HashMap<String, Label>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let grade = match row.grade.as_deref() {
            None | Some("") => None,
            Some(g) => Some(g.parse()?),
        };
        out.insert(row.image_id, Label { cdr: row.cdr, grade });
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.as_str())) {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().unwrap().as_encoded_bytes().cmp(b.file_name().unwrap().as_encoded_bytes()));
    Ok(files)
}

fn counterpart(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

impl DatasetIndex {
    /// Indexes `root`; every entry starts in the training split.
    pub fn scan(root: &Path) -> Result<Self> {
        let labels_path = root.join(LABELS_FILE);
        let labels = if labels_path.is_file() {
            read_labels(&labels_path)?
        } else {
            HashMap::new()
        };
        let mut entries = Vec::new();
        for image in list_images(&root.join("images"))? {
            let id = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let find = |sub: &str| {
                counterpart(&root.join(sub), &id)
                    .ok_or_else(|| Error::Load(format!("entry {id}: no {sub}/{id}.* counterpart")))
            };
            entries.push(Entry {
                disc: find("masks_disc")?,
                cup: find("masks_cup")?,
                label: labels.get(&id).copied(),
                id,
                image,
                split: Split::Train,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            seed: 0,
        })
    }

    /// Shuffles with `seed` and assigns the leading fractions to test and validation.
    pub fn assign_splits(&mut self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<()> {
        if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0) {
            return Err(Error::Config(format!("split fractions {val_fraction}, {test_fraction} invalid")));
        }
        let n = self.entries.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * n as f64).round() as usize;
        let n_val = ((val_fraction * n as f64).round() as usize).min(n - n_test);
        for (rank, &i) in order.iter().enumerate() {
            self.entries[i].split = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
        self.seed = seed;
        Ok(())
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == which)
    }

    /// Decodes entries in parallel, keeping index order.
    pub fn load<'a>(&self, entries: impl IntoIterator<Item = &'a Entry>, size: Option<usize>) -> Result<Vec<SegPair>> {
        let entries: Vec<&Entry> = entries.into_iter().collect();
        entries.par_iter().map(|e| load_entry(e, size)).collect()
    }
}

fn load_entry(e: &Entry, size: Option<usize>) -> Result<SegPair> {
    let mut img = read_rgb(&e.image)?;
    let mut disc = read_gray(&e.disc)?;
    let mut cup = read_gray(&e.cup)?;
    if img.dimensions() != disc.dimensions() || img.dimensions() != cup.dimensions() {
        return Err(Error::Load(format!(
            "entry {}: image {:?}, disc {:?} and cup {:?} extents differ",
            e.id,
            img.dimensions(),
            disc.dimensions(),
            cup.dimensions()
        )));
    }
    if let Some(s) = size {
        let s = s as u32;
        if img.dimensions() != (s, s) {
            img = imageops::resize(&img, s, s, FilterType::Triangle);
            disc = imageops::resize(&disc, s, s, FilterType::Nearest);
            cup = imageops::resize(&cup, s, s, FilterType::Nearest);
        }
    }
    let disc = gray_to_mask(&disc);
    let mut cup = gray_to_mask(&cup);
    if !cup.is_subset_of(&disc) {
        log::warn!("entry {}: cup extends outside the disc, clipping", e.id);
        cup = cup.and(&disc)?;
    }
    Ok(SegPair {
        id: e.id.clone(),
        image: rgb_to_tensor(&img),
        disc,
        cup,
        cdr: e.label.and_then(|l| l.cdr),
        grade: e.label.and_then(|l| l.grade),
    })
}

/// Indexes and decodes every entry under `root`, resizing to `size` when given.
pub fn load_dataset(root: &Path, size: Option<usize>) -> Result<(DatasetIndex, Vec<SegPair>)> {
    let index = DatasetIndex::scan(root)?;
    let samples = index.load(&index.entries, size)?;
    Ok((index, samples))
}

#[derive(Serialize)]
struct LabelOut<'a> {
    image_id: &'a str,
    cdr: Option<f64>,
    grade: Option<Grade>,
}

/// Writes samples in the directory layout above.
pub fn write_dataset(root: &Path, samples: &[SegPair]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in samples {
        write_png_rgb(&root.join("images").join(format!("{}.png", s.id)), &tensor_to_rgb(&s.image)?)?;
        write_png_mask(&root.join("masks_disc").join(format!("{}.png", s.id)), &s.disc)?;
        write_png_mask(&root.join("masks_cup").join(format!("{}.png", s.id)), &s.cup)?;
    }
    let path = root.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for s in samples {
        w.serialize(LabelOut {
            image_id: &s.id,
            cdr: s.cdr,
            grade: s.grade,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
